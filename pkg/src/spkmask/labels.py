"""Vocabulary and the three speaker-attributed label serializations.

Layouts per speaker block, speakers ordered by first speaking time:

    SPK       <S_k> W_k
    SPK_TS_1  <S_k> <T_start> W_k <T_end>
    SPK_TS_2  <S_k> <T_start> <T_end> W_k

Timestamps are quantized to a 20 ms grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

TIME_STEP_S = 0.02
DEFAULT_CHARSET = "abcdefghijklmnopqrstuvwxyz' "


class LabelError(ValueError):
    pass


class Scheme(str, Enum):
    SPK = "SPK"
    SPK_TS_1 = "SPK_TS_1"
    SPK_TS_2 = "SPK_TS_2"

    @property
    def timestamped(self) -> bool:
        return self is not Scheme.SPK


def quantize_time(t_s: float, max_s: float = 30.0) -> int:
    """Index of the nearest 20 ms grid point; ties round up."""
    if not 0.0 <= t_s <= max_s + 1e-9:
        raise LabelError(f"time {t_s} outside [0, {max_s}]")
    # the small nudge keeps exact half-steps like 0.03 s from rounding down through float error
    return int(math.floor(t_s / TIME_STEP_S + 0.5 + 1e-9))


def dequantize_time(index: int) -> float:
    return round(index * TIME_STEP_S, 10)


@dataclass
class Vocabulary:
    max_speakers: int = 4
    max_s: float = 30.0
    charset: str = DEFAULT_CHARSET
    token_to_id: dict[str, int] = field(init=False, repr=False)

    PAD, SOT, EOT = "<PAD>", "<SOT>", "<EOT>"

    def __post_init__(self):
        tokens = [self.PAD, self.SOT, self.EOT]
        tokens += [f"<S_{k}>" for k in range(1, self.max_speakers + 1)]
        tokens += [f"<T_{i}>" for i in range(self.num_timestamps)]
        tokens += list(self.charset)
        if len(set(tokens)) != len(tokens):
            raise LabelError("vocabulary tokens must be distinct")
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        self.id_to_token = tokens
        self.pad_id, self.sot_id, self.eot_id = 0, 1, 2
        self.first_speaker_id = 3
        self.first_timestamp_id = self.first_speaker_id + self.max_speakers
        self.first_text_id = self.first_timestamp_id + self.num_timestamps

    @property
    def num_timestamps(self) -> int:
        return int(round(self.max_s / TIME_STEP_S)) + 1

    def __len__(self):
        return len(self.id_to_token)

    def speaker_token(self, k: int) -> int:
        if not 1 <= k <= self.max_speakers:
            raise LabelError(f"speaker index {k} outside 1..{self.max_speakers}")
        return self.first_speaker_id + k - 1

    def timestamp_token(self, t_s: float) -> int:
        return self.first_timestamp_id + quantize_time(t_s, self.max_s)

    def is_speaker(self, tok: int) -> bool:
        return self.first_speaker_id <= tok < self.first_timestamp_id

    def is_timestamp(self, tok: int) -> bool:
        return self.first_timestamp_id <= tok < self.first_text_id

    def is_text(self, tok: int) -> bool:
        return self.first_text_id <= tok < len(self)

    def speaker_index(self, tok: int) -> int:
        return tok - self.first_speaker_id + 1

    def timestamp_value(self, tok: int) -> float:
        return dequantize_time(tok - self.first_timestamp_id)

    def encode_text(self, text: str) -> list[int]:
        try:
            return [self.token_to_id[c] for c in text]
        except KeyError as err:
            raise LabelError(f"character {err.args[0]!r} not in vocabulary") from None

    def decode(self, tokens: Sequence[int]) -> list[str]:
        return [self.id_to_token[t] for t in tokens]

    def to_json(self) -> dict:
        return {"max_speakers": self.max_speakers, "max_s": self.max_s, "charset": self.charset,
                "tokens": self.token_to_id}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        vocab = cls(obj["max_speakers"], obj["max_s"], obj["charset"])
        if "tokens" in obj and obj["tokens"] != vocab.token_to_id:
            raise LabelError("serialized token map does not match its vocabulary settings")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class SpeakerBlock:
    speaker_index: int | None
    words: list[str]
    start_s: float | None = None
    end_s: float | None = None
    speaker_id: str | None = None

    @property
    def has_times(self) -> bool:
        return self.start_s is not None and self.end_s is not None


@dataclass
class LabelSequence:
    scheme: Scheme
    tokens: list[int]

    def __len__(self):
        return len(self.tokens)


def reference_blocks(example) -> list[SpeakerBlock]:
    """One block per speaker in first-in-first-out order, with text and spans from alignments.

    A speaker with several utterances gets a single block: their transcripts are
    concatenated in temporal order and the span runs from the earliest aligned
    start to the latest aligned end.
    """
    blocks = []
    sources = sorted(example.sources, key=lambda s: s.offset_s)
    for k, spk in enumerate(example.speaker_order(), 1):
        words: list[str] = []
        starts, ends = [], []
        for src in sources:
            utt = src.utterance
            if utt.speaker_id != spk:
                continue
            words.extend(utt.transcript)
            if utt.word_alignments:
                starts.append(src.offset_s + utt.word_alignments[0][1])
                ends.append(src.offset_s + max(e for _, _, e in utt.word_alignments))
            else:
                starts.append(None)
        if any(s is None for s in starts):
            start = end = None
        else:
            start, end = min(starts), max(ends)
        blocks.append(SpeakerBlock(k, words, start, end, spk))
    return blocks


def build_label(example, scheme: Scheme | str, vocab: Vocabulary) -> LabelSequence:
    scheme = Scheme(scheme)
    blocks = reference_blocks(example)
    if len(blocks) > vocab.max_speakers:
        raise LabelError(f"{example.id}: {len(blocks)} speakers exceed vocabulary limit {vocab.max_speakers}")
    tokens = [vocab.sot_id]
    for block in blocks:
        text = vocab.encode_text(" ".join(block.words))
        tokens.append(vocab.speaker_token(block.speaker_index))
        if scheme is Scheme.SPK:
            tokens += text
            continue
        if not block.has_times:
            raise LabelError(f"{example.id}: scheme {scheme.value} needs word alignments for every source")
        ts, te = vocab.timestamp_token(block.start_s), vocab.timestamp_token(block.end_s)
        if scheme is Scheme.SPK_TS_1:
            tokens += [ts, *text, te]
        else:
            tokens += [ts, te, *text]
    tokens.append(vocab.eot_id)
    return LabelSequence(scheme, tokens)


def parse_hypothesis(tokens: Sequence[int], scheme: Scheme | str, vocab: Vocabulary) -> tuple[list[SpeakerBlock], int]:
    """Greedy left-to-right parse of a decoded token stream.

    Never raises on malformed input. Tokens that do not fit the scheme grammar
    are skipped and counted; a block whose timestamps are incomplete keeps its
    text but loses its times. Text before any speaker token goes into an
    anonymous block (``speaker_index=None``).

    Returns:
        (blocks, malformed_token_count)
    """
    scheme = Scheme(scheme)
    tokens = list(tokens)
    if tokens and tokens[0] == vocab.sot_id:
        tokens = tokens[1:]
    blocks: list[SpeakerBlock] = []
    malformed = 0
    cur: dict | None = None

    def close():
        nonlocal malformed
        if cur is None:
            return
        start = end = None
        if scheme.timestamped and cur["k"] is not None:
            times = cur["times"]
            if len(times) == 2 and not cur["broken"] and times[0] <= times[1]:
                start, end = times
            else:
                malformed += 1
        words = "".join(cur["chars"]).split()
        blocks.append(SpeakerBlock(cur["k"], words, start, end))

    for tok in tokens:
        if tok == vocab.eot_id:
            break
        if vocab.is_speaker(tok):
            close()
            cur = {"k": vocab.speaker_index(tok), "times": [], "chars": [], "broken": False, "text_seen": False}
        elif vocab.is_timestamp(tok):
            if cur is None or not scheme.timestamped or cur["k"] is None:
                malformed += 1
                continue
            t = vocab.timestamp_value(tok)
            n = len(cur["times"])
            if scheme is Scheme.SPK_TS_1:
                ok = (n == 0 and not cur["text_seen"]) or (n == 1 and cur["text_seen"])
            else:
                ok = n < 2 and not cur["text_seen"]
            if ok:
                cur["times"].append(t)
            else:
                malformed += 1
        elif vocab.is_text(tok):
            if cur is None:
                cur = {"k": None, "times": [], "chars": [], "broken": False, "text_seen": False}
            if scheme.timestamped and cur["k"] is not None:
                n = len(cur["times"])
                closed = scheme is Scheme.SPK_TS_1 and n == 2
                if closed:
                    malformed += 1
                    continue
                expected = 1 if scheme is Scheme.SPK_TS_1 else 2
                if not cur["text_seen"] and n < expected:
                    cur["broken"] = True
            cur["text_seen"] = True
            cur["chars"].append(vocab.id_to_token[tok])
        else:
            malformed += 1
    close()
    return blocks, malformed
