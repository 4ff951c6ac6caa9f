"""Greedy decoding and conversion of decoded tokens / masks into diarization annotations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .labels import Scheme, SpeakerBlock, Vocabulary, parse_hypothesis, reference_blocks
from .signal import MASK_FRAME_MS, MaskVector, mask_frame_count

FRAME_S = MASK_FRAME_MS / 1000.0


class DiarizationError(ValueError):
    pass


@dataclass
class Hypothesis:
    id: str
    scheme: Scheme
    tokens: list[int]
    blocks: list[SpeakerBlock]
    masks: dict[int, MaskVector] = field(default_factory=dict)
    malformed_token_count: int = 0

    def words_by_speaker(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for block in self.blocks:
            out.setdefault(speaker_label(block.speaker_index), []).extend(block.words)
        return out

    @property
    def speaker_count(self) -> int:
        return len({b.speaker_index for b in self.blocks})

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "scheme": self.scheme.value,
            "tokens": list(self.tokens),
            "blocks": [{"speaker": speaker_label(b.speaker_index), "speaker_index": b.speaker_index,
                        "words": b.words, "start_s": b.start_s, "end_s": b.end_s} for b in self.blocks],
            "masks": {str(k): [round(float(v), 6) for v in m.values] for k, m in sorted(self.masks.items())},
            "malformed_token_count": self.malformed_token_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Hypothesis":
        blocks = [SpeakerBlock(b["speaker_index"], list(b["words"]), b.get("start_s"), b.get("end_s"))
                  for b in obj["blocks"]]
        masks = {int(k): MaskVector(v, "probability") for k, v in obj.get("masks", {}).items()}
        return cls(obj["id"], Scheme(obj["scheme"]), list(obj["tokens"]), blocks, masks,
                   obj.get("malformed_token_count", 0))


def speaker_label(index: int | None) -> str:
    return "anon" if index is None else f"spk{index}"


@dataclass
class DiarizationAnnotation:
    segments: list[tuple[str, float, float]]
    source: str = "reference"

    def __post_init__(self):
        self.segments = normalize_segments(self.segments)

    @property
    def speakers(self) -> list[str]:
        return sorted({s for s, _, _ in self.segments})

    def by_speaker(self) -> dict[str, list[tuple[float, float]]]:
        out: dict[str, list[tuple[float, float]]] = {}
        for spk, start, end in self.segments:
            out.setdefault(spk, []).append((start, end))
        return out


def normalize_segments(segments: Iterable[tuple[str, float, float]]) -> list[tuple[str, float, float]]:
    """Drop empty segments and merge overlapping or touching segments of the same speaker."""
    per: dict[str, list[tuple[float, float]]] = {}
    for spk, start, end in segments:
        if end > start:
            per.setdefault(str(spk), []).append((float(start), float(end)))
    out = []
    for spk in sorted(per):
        merged: list[list[float]] = []
        for start, end in sorted(per[spk]):
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        out.extend((spk, s, e) for s, e in merged)
    return sorted(out, key=lambda x: (x[1], x[0], x[2]))


# ---------------------------------------------------------------------------
# decoding

@torch.no_grad()
def greedy_decode(model, features, vocab: Vocabulary, max_len: int = 128, return_hidden: bool = False):
    """Argmax decoding from SOT until EOT or ``max_len`` generated tokens.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest
    token id. Returns the generated tokens (SOT prompt excluded); with
    ``return_hidden`` also the encoder states and the final decoder state that
    produced each generated token.
    """
    if model.training:
        raise RuntimeError("greedy_decode needs the model in eval mode")
    dtype = next(model.parameters()).dtype
    features = torch.as_tensor(features, dtype=dtype)
    enc = model.encode(features)
    max_len = min(max_len, model.config.max_tokens)
    tokens = [vocab.sot_id]
    states = []
    for _ in range(max_len):
        logits, hidden = model.decode(enc, torch.tensor([tokens]))
        nxt = int(torch.argmax(logits[0, -1]))
        states.append(hidden[0, -1])
        tokens.append(nxt)
        if nxt == vocab.eot_id:
            break
    generated = tokens[1:]
    if return_hidden:
        return generated, enc, torch.stack(states) if states else None
    return generated


@torch.no_grad()
def decode_example(model, features, vocab: Vocabulary, scheme, example_id: str = "", max_len: int = 128) -> Hypothesis:
    """Decode tokens, parse them, and query the mask branch at every emitted speaker token."""
    scheme = Scheme(scheme)
    generated, enc, states = greedy_decode(model, features, vocab, max_len, return_hidden=True)
    blocks, malformed = parse_hypothesis(generated, scheme, vocab)
    masks: dict[int, MaskVector] = {}
    gated = [(i, vocab.speaker_index(t)) for i, t in enumerate(generated) if vocab.is_speaker(t)]
    if gated:
        rows = torch.tensor([i for i, _ in gated])
        probs = model.masks(states[rows], enc.expand(len(gated), -1, -1)).cpu().numpy()
        for (_, k), p in zip(gated, probs):
            values = p.astype(np.float64)
            if k in masks:
                values = np.maximum(values, masks[k].values)
            masks[k] = MaskVector(values, "probability")
    return Hypothesis(example_id, scheme, generated, blocks, masks, malformed)


# ---------------------------------------------------------------------------
# masks <-> segments

def mask_to_segments(mask: MaskVector | np.ndarray, threshold: float = 0.5, min_dur_s: float = 0.0,
                     frame_s: float = FRAME_S) -> list[tuple[float, float]]:
    """Maximal runs of frames with value >= threshold, as (start_s, end_s); runs shorter than ``min_dur_s`` dropped."""
    values = mask.values if isinstance(mask, MaskVector) else np.asarray(mask, dtype=np.float64)
    active = values >= threshold
    padded = np.concatenate([[False], active, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    out = []
    for start, end in zip(edges[::2], edges[1::2]):
        if (end - start) * frame_s + 1e-9 >= min_dur_s:
            out.append((round(start * frame_s, 6), round(end * frame_s, 6)))
    return out


def segments_to_mask(segments: Sequence[tuple[float, float]], num_frames: int, frame_s: float = FRAME_S) -> np.ndarray:
    out = np.zeros(num_frames)
    for start, end in segments:
        lo = int(round(start / frame_s))
        hi = int(round(end / frame_s))
        out[max(lo, 0):min(hi, num_frames)] = 1.0
    return out


def hypothesis_to_diarization(hyp: Hypothesis, mode: str, threshold: float = 0.5, min_dur_s: float = 0.0,
                              num_frames: int | None = None) -> DiarizationAnnotation:
    """Speaker segments from timestamps (one [start, end] per block) or from predicted masks.

    ``num_frames`` truncates predicted masks to the recording's length.
    """
    segments = []
    if mode == "timestamps":
        if not hyp.scheme.timestamped:
            raise DiarizationError(f"timestamp diarization needs a timestamped scheme, got {hyp.scheme.value}")
        for block in hyp.blocks:
            if block.has_times and block.speaker_index is not None:
                segments.append((speaker_label(block.speaker_index), block.start_s, block.end_s))
    elif mode == "mask":
        if not hyp.masks and any(b.speaker_index is not None for b in hyp.blocks):
            raise DiarizationError("mask diarization needs mask predictions")
        for k, mask in sorted(hyp.masks.items()):
            values = mask.values if num_frames is None else mask.values[:num_frames]
            for start, end in mask_to_segments(values, threshold, min_dur_s):
                segments.append((speaker_label(k), start, end))
    else:
        raise DiarizationError(f"unknown diarization mode {mode!r}")
    return DiarizationAnnotation(segments, mode)


def reference_diarization(example) -> DiarizationAnnotation:
    """Reference segments from an example's binary mask targets, labelled with real speaker ids."""
    segments = []
    for spk, mask in example.speaker_masks.items():
        segments += [(spk, s, e) for s, e in mask_to_segments(mask)]
    return DiarizationAnnotation(segments, "reference")


def reference_hypothesis(example, vocab: Vocabulary, scheme) -> Hypothesis:
    """A hypothesis that reproduces the reference exactly: its label tokens, blocks and binary masks."""
    from .labels import build_label

    scheme = Scheme(scheme)
    tokens = build_label(example, scheme, vocab).tokens[1:]
    blocks = reference_blocks(example)
    for b in blocks:
        b.speaker_id = None
        if not scheme.timestamped:
            b.start_s = b.end_s = None
    order = example.speaker_order()
    masks = {k: MaskVector(example.speaker_masks[spk].values, "probability") for k, spk in enumerate(order, 1)}
    return Hypothesis(example.id, scheme, tokens, blocks, masks, 0)


# ---------------------------------------------------------------------------
# RTTM

def rttm_lines(uri: str, annotation: DiarizationAnnotation) -> list[str]:
    return [f"SPEAKER {uri} 1 {start:.3f} {end - start:.3f} <NA> <NA> {spk} <NA> <NA>"
            for spk, start, end in annotation.segments]


def write_rttm(path, annotations: dict[str, DiarizationAnnotation]) -> None:
    with open(path, "w") as fh:
        for uri, ann in annotations.items():
            for line in rttm_lines(uri, ann):
                fh.write(line + "\n")


def read_rttm(path, source: str = "reference") -> dict[str, DiarizationAnnotation]:
    """Parse SPEAKER lines; any malformed line raises DiarizationError naming its line number."""
    per: dict[str, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            try:
                if fields[0] != "SPEAKER" or len(fields) < 8:
                    raise ValueError("expected 'SPEAKER <uri> <chan> <tbeg> <tdur> <NA> <NA> <spk> ...'")
                start, dur = float(fields[3]), float(fields[4])
                if dur < 0 or start < 0:
                    raise ValueError("negative time")
            except ValueError as err:
                raise DiarizationError(f"{path}:{lineno}: malformed RTTM line ({err})") from None
            per.setdefault(fields[1], []).append((fields[7], start, start + dur))
    return {uri: DiarizationAnnotation(segs, source) for uri, segs in per.items()}


def write_hypotheses(path, hyps: Sequence[Hypothesis]) -> None:
    Path(path).write_text(json.dumps([h.to_json() for h in hyps], indent=1) + "\n")


def read_hypotheses(path) -> list[Hypothesis]:
    return [Hypothesis.from_json(obj) for obj in json.loads(Path(path).read_text())]


def example_num_frames(example) -> int:
    return mask_frame_count(example.mixture.duration_s)
