"""Case 1 / Case 2 overlapped mixtures, per-speaker mask targets and training manifests.

Case 1 overlaps the tail of one speaker's utterance with the head of another
speaker's utterance. Case 2 interleaves speaker 1, speaker 2, speaker 1 with an
independent overlap at each junction. Mask targets are energy-VAD frames of
each source, restricted to the source's word-alignment spans.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .signal import (
    MASK_FRAME_MS,
    SAMPLE_RATE,
    AudioClip,
    MaskVector,
    energy_vad,
    load_wav,
    mask_frame_count,
    mean_power,
    mix_at_offsets,
    save_wav,
    sir_gain,
)

log = logging.getLogger(__name__)

CASE_KINDS = ("original", "case1", "case2")
DEFAULT_VAD_THRESHOLD_DB = -40.0


class SimulationError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    audio: AudioClip | None
    speaker_id: str
    transcript: list[str]
    word_alignments: list[tuple[str, float, float]] = field(default_factory=list)
    audio_path: str | None = None

    def __post_init__(self):
        prev = 0.0
        for word, start, end in self.word_alignments:
            if start < prev - 1e-9 or end < start:
                raise SimulationError(f"{self.id}: alignments must be monotone, got {word!r} [{start}, {end}]")
            prev = start
        if self.audio is not None and self.word_alignments:
            last = max(end for _, _, end in self.word_alignments)
            if last > self.audio.duration_s + 1e-6:
                raise SimulationError(f"{self.id}: alignment end {last} beyond clip duration {self.audio.duration_s}")

    @property
    def duration_s(self) -> float:
        if self.audio is None:
            raise SimulationError(f"{self.id}: audio not loaded")
        return self.audio.duration_s


@dataclass
class Source:
    utterance: Utterance
    offset_s: float
    gain: float


@dataclass
class MixtureExample:
    id: str
    mixture: AudioClip
    sources: list[Source]
    case_kind: str
    speaker_masks: dict[str, MaskVector] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def num_speakers(self) -> int:
        return len({s.utterance.speaker_id for s in self.sources})

    @property
    def num_frames(self) -> int:
        return mask_frame_count(self.mixture.duration_s)

    def speaker_order(self) -> list[str]:
        """Speaker ids ordered by earliest start time (first in, first out)."""
        first: dict[str, float] = {}
        for src in self.sources:
            start = src.offset_s + (src.utterance.word_alignments[0][1] if src.utterance.word_alignments else 0.0)
            spk = src.utterance.speaker_id
            first[spk] = min(first.get(spk, np.inf), start)
        return sorted(first, key=lambda s: (first[s], s))

    def speaker_spans(self, speaker_id: str) -> list[tuple[float, float]]:
        """Offset-shifted alignment spans (or whole-clip spans) of one speaker's sources."""
        spans = []
        for src in self.sources:
            if src.utterance.speaker_id != speaker_id:
                continue
            spans.extend(_source_spans(src))
        return spans


@dataclass
class RatioSpec:
    parts: dict[str, int]

    def __post_init__(self):
        for kind, weight in self.parts.items():
            if kind not in CASE_KINDS:
                raise SimulationError(f"unknown case kind {kind!r}")
            if not isinstance(weight, (int, np.integer)) or isinstance(weight, bool) or weight <= 0:
                raise SimulationError(f"ratio weight for {kind} must be a positive integer, got {weight!r}")


def _source_spans(src: Source) -> list[tuple[float, float]]:
    utt = src.utterance
    if utt.word_alignments:
        return [(src.offset_s + s, src.offset_s + e) for _, s, e in utt.word_alignments]
    return [(src.offset_s, src.offset_s + utt.duration_s)]


def spans_to_frames(spans: Iterable[tuple[float, float]], num_frames: int, frame_ms: int = MASK_FRAME_MS) -> np.ndarray:
    """Frames whose center falls inside any [start, end) span."""
    centers = (np.arange(num_frames) + 0.5) * frame_ms / 1000.0
    out = np.zeros(num_frames, dtype=bool)
    for start, end in spans:
        out |= (centers >= start) & (centers < end)
    return out


def mask_targets(example: MixtureExample, vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> dict[str, MaskVector]:
    """Per-speaker binary masks over the mixture's 20 ms frames.

    Each source's VAD is computed on the mixture time grid and ANDed with its
    word-alignment spans; sources of the same speaker are ORed. Sources without
    alignments fall back to pure VAD and are listed in ``example.meta["vad_only"]``.
    """
    total = len(example.mixture)
    count = example.num_frames
    masks: dict[str, np.ndarray] = {}
    vad_only = []
    for src in example.sources:
        utt = src.utterance
        if utt.audio is None:
            raise SimulationError(f"{utt.id}: source audio needed for mask targets")
        start = int(round(src.offset_s * example.mixture.sample_rate_hz))
        placed = np.zeros(total)
        seg = utt.audio.samples[: max(0, total - start)]
        placed[start:start + len(seg)] = seg
        active = energy_vad(AudioClip(placed, example.mixture.sample_rate_hz), MASK_FRAME_MS, vad_threshold_db).values > 0
        active = active[:count]
        if utt.word_alignments:
            active &= spans_to_frames(_source_spans(src), count)
        else:
            vad_only.append(utt.id)
        spk = utt.speaker_id
        masks[spk] = masks.get(spk, np.zeros(count, dtype=bool)) | active
    if vad_only:
        log.warning("no word alignments for %s; mask targets use VAD only", ", ".join(vad_only))
        example.meta["vad_only"] = vad_only
    return {spk: MaskVector(m.astype(np.float64), "binary") for spk, m in masks.items()}


def _finish(example: MixtureExample, vad_threshold_db: float) -> MixtureExample:
    example.meta["peak"] = example.mixture.peak
    example.speaker_masks = mask_targets(example, vad_threshold_db)
    return example


def make_original(utt: Utterance, example_id: str | None = None,
                  vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> MixtureExample:
    ex = MixtureExample(example_id or utt.id, utt.audio, [Source(utt, 0.0, 1.0)], "original")
    return _finish(ex, vad_threshold_db)


def make_case1(a: Utterance, b: Utterance, overlap_s: float, sir_db: float = 0.0, rng=None,
               example_id: str | None = None, vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> MixtureExample:
    """Overlap the tail of ``a`` with the head of ``b``; ``b`` is scaled to the requested SIR."""
    if a.speaker_id == b.speaker_id:
        raise SimulationError(f"case 1 needs two different speakers, got {a.speaker_id} twice")
    if overlap_s < 0 or overlap_s > min(a.duration_s, b.duration_s) + 1e-9:
        raise SimulationError(
            f"overlap {overlap_s:.3f}s exceeds the shorter utterance ({min(a.duration_s, b.duration_s):.3f}s)"
        )
    gain = sir_gain(mean_power(a.audio), mean_power(b.audio), sir_db)
    offset = max(0.0, a.duration_s - overlap_s)
    sources = [Source(a, 0.0, 1.0), Source(b, offset, gain)]
    mix = mix_at_offsets([(s.utterance.audio, s.offset_s, s.gain) for s in sources])
    ex = MixtureExample(example_id or f"{a.id}+{b.id}", mix, sources, "case1", meta={"sir_db": sir_db, "overlaps_s": [overlap_s]})
    return _finish(ex, vad_threshold_db)


def make_case2(a1: Utterance, b: Utterance, a2: Utterance, overlap1_s: float, overlap2_s: float,
               sir_db: float = 0.0, rng=None, example_id: str | None = None,
               vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> MixtureExample:
    """Speaker 1, speaker 2, speaker 1 with an overlap at each junction.

    Speaker 1's two utterances may not overlap each other, so the overlaps must
    satisfy ``overlap1_s + overlap2_s <= duration(b)``.
    """
    if a1.speaker_id != a2.speaker_id:
        raise SimulationError(f"case 2 needs the same first and third speaker, got {a1.speaker_id}, {a2.speaker_id}")
    if a1.speaker_id == b.speaker_id:
        raise SimulationError(f"case 2 middle speaker must differ, got {b.speaker_id}")
    eps = 1e-9
    if overlap1_s < 0 or overlap2_s < 0:
        raise SimulationError("overlaps must be non-negative")
    if overlap1_s > min(a1.duration_s, b.duration_s) + eps:
        raise SimulationError(f"first overlap {overlap1_s:.3f}s exceeds the shorter of its utterances")
    if overlap2_s > min(a2.duration_s, b.duration_s) + eps:
        raise SimulationError(f"second overlap {overlap2_s:.3f}s exceeds the shorter of its utterances")
    if overlap1_s + overlap2_s > b.duration_s + eps:
        raise SimulationError(
            f"overlaps {overlap1_s:.3f}+{overlap2_s:.3f}s exceed the middle utterance ({b.duration_s:.3f}s)"
        )
    target = np.concatenate([a1.audio.samples, a2.audio.samples])
    gain = sir_gain(mean_power(target), mean_power(b.audio), sir_db)
    off_b = max(0.0, a1.duration_s - overlap1_s)
    off_a2 = max(0.0, off_b + b.duration_s - overlap2_s)
    sources = [Source(a1, 0.0, 1.0), Source(b, off_b, gain), Source(a2, off_a2, 1.0)]
    mix = mix_at_offsets([(s.utterance.audio, s.offset_s, s.gain) for s in sources])
    ex = MixtureExample(example_id or f"{a1.id}+{b.id}+{a2.id}", mix, sources, "case2",
                        meta={"sir_db": sir_db, "overlaps_s": [overlap1_s, overlap2_s]})
    return _finish(ex, vad_threshold_db)


def measured_sir_db(example: MixtureExample) -> float:
    """Post-scaling power ratio (dB) of the first speaker's sources vs. the rest, over full clips."""
    first = example.sources[0].utterance.speaker_id
    target = np.concatenate([s.gain * s.utterance.audio.samples for s in example.sources if s.utterance.speaker_id == first])
    other = np.concatenate([s.gain * s.utterance.audio.samples for s in example.sources if s.utterance.speaker_id != first])
    return 10.0 * np.log10(mean_power(target) / mean_power(other))


def _by_speaker(corpus: Sequence[Utterance]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, utt in enumerate(corpus):
        groups.setdefault(utt.speaker_id, []).append(i)
    return groups


def _pick_other_speaker(rng, groups, speaker_id, corpus):
    # uniform over utterances of all other speakers
    pool = [i for spk, idx in groups.items() if spk != speaker_id for i in idx]
    return corpus[pool[int(rng.integers(len(pool)))]]


def _draw(rng, low: float, high: float) -> float:
    return float(rng.uniform(low, max(low, high)))


def _example(kind, index, corpus, groups, sir_db, seed, overlap_range_s=(0.0, 5.0), fixed_overlap_s=None,
             vad_threshold_db=DEFAULT_VAD_THRESHOLD_DB):
    rng = np.random.default_rng([seed, index])
    a = corpus[index % len(corpus)]
    ex_id = f"{kind}-{index:06d}"
    lo, hi = overlap_range_s
    if kind == "original":
        return make_original(a, ex_id, vad_threshold_db)
    b = _pick_other_speaker(rng, groups, a.speaker_id, corpus)
    if kind == "case1":
        if fixed_overlap_s is not None:
            ov = fixed_overlap_s
        else:
            ov = _draw(rng, lo, min(hi, a.duration_s, b.duration_s))
        return make_case1(a, b, ov, sir_db, rng, ex_id, vad_threshold_db)
    same = [i for i in groups[a.speaker_id] if corpus[i] is not a]
    a2 = corpus[same[int(rng.integers(len(same)))]] if same else a
    if fixed_overlap_s is not None:
        ov1 = ov2 = fixed_overlap_s
    else:
        ov1 = _draw(rng, lo, min(hi, a.duration_s, b.duration_s))
        ov2 = _draw(rng, lo, min(hi, a2.duration_s, b.duration_s - ov1))
    return make_case2(a, b, a2, ov1, ov2, sir_db, rng, ex_id, vad_threshold_db)


def build_training_set(corpus: Sequence[Utterance], ratio: RatioSpec | dict, sir_db: float = 0.0,
                       overlap_range_s: tuple[float, float] = (0.0, 5.0), seed: int = 0,
                       vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> list[MixtureExample]:
    """Original and simulated examples, ``weight * len(corpus)`` of each case kind.

    Overlaps are drawn uniformly from ``overlap_range_s`` capped at what the
    chosen utterances allow. Each example has its own generator seeded by
    ``(seed, example_index)``.
    """
    if not isinstance(ratio, RatioSpec):
        ratio = RatioSpec(dict(ratio))
    groups = _by_speaker(corpus)
    if len(groups) < 2:
        raise SimulationError("corpus needs at least 2 speakers to simulate overlaps")
    out = []
    index = 0
    for kind in CASE_KINDS:
        for _ in range(ratio.parts.get(kind, 0) * len(corpus)):
            out.append(_example(kind, index, corpus, groups, sir_db, seed, overlap_range_s,
                                vad_threshold_db=vad_threshold_db))
            index += 1
    return out


def build_eval_set(corpus: Sequence[Utterance], case_kind: str, overlap_s: float, sir_db: float = 0.0,
                   seed: int = 0, vad_threshold_db: float = DEFAULT_VAD_THRESHOLD_DB) -> list[MixtureExample]:
    """One mixture per corpus utterance with a fixed overlap; infeasible items are skipped and logged."""
    groups = _by_speaker(corpus)
    if len(groups) < 2:
        raise SimulationError("corpus needs at least 2 speakers to simulate overlaps")
    out = []
    for index in range(len(corpus)):
        try:
            out.append(_example(case_kind, index, corpus, groups, sir_db, seed, fixed_overlap_s=overlap_s,
                                vad_threshold_db=vad_threshold_db))
        except SimulationError as err:
            log.warning("skipping %s item %d: %s", case_kind, index, err)
    return out


# ---------------------------------------------------------------------------
# toy corpus

DEFAULT_TOY_VOCAB = ("ba", "di", "ku", "mo", "ne", "so", "ta", "vi")


def _word_tone(word_index: int, f0: float, duration_s: float, rate: int, amplitude: float) -> np.ndarray:
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    half = n // 2
    # two sub-tones per word; harmonic numbers encode the word identity
    h1 = 2 + word_index % 4
    h2 = 2 + (word_index // 4) % 4 + (1 if word_index % 4 == (word_index // 4) % 4 else 0)
    harmonic = np.where(np.arange(n) < half, h1, h2)
    wave_ = 0.6 * np.sin(2 * np.pi * f0 * t) + 0.4 * np.sin(2 * np.pi * f0 * harmonic * t)
    ramp = min(int(0.01 * rate), n // 2)
    env = np.ones(n)
    if ramp:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = edge
        env[n - ramp:] = edge[::-1]
    return amplitude * wave_ * env


def gen_toy_corpus(num_speakers: int = 2, utts_per_speaker: int = 8, vocab: Sequence[str] = DEFAULT_TOY_VOCAB,
                   seed: int = 0, word_dur_s: float = 0.25, words_per_utt: tuple[int, int] = (2, 4),
                   sample_rate_hz: int = SAMPLE_RATE) -> list[Utterance]:
    """Synthetic speakers (one F0 band each) uttering tone-burst "words" with exact alignments."""
    if not vocab:
        raise SimulationError("toy vocabulary must be nonempty")
    rng = np.random.default_rng(seed)
    corpus = []
    for s in range(num_speakers):
        band = 100.0 + 70.0 * s
        for u in range(utts_per_speaker):
            f0 = float(rng.uniform(band, band + 20.0))
            amplitude = float(rng.uniform(0.2, 0.4))
            n_words = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
            words = [int(rng.integers(len(vocab))) for _ in range(n_words)]
            pieces = [_word_tone(w, f0, word_dur_s, sample_rate_hz, amplitude) for w in words]
            per_word = len(pieces[0]) / sample_rate_hz
            alignments = [(vocab[w], i * per_word, (i + 1) * per_word) for i, w in enumerate(words)]
            corpus.append(Utterance(
                id=f"spk{s:02d}-utt{u:03d}",
                audio=AudioClip(np.concatenate(pieces), sample_rate_hz),
                speaker_id=f"spk{s:02d}",
                transcript=[vocab[w] for w in words],
                word_alignments=alignments,
            ))
    return corpus


# ---------------------------------------------------------------------------
# manifests

def mask_to_rle(values: np.ndarray) -> list[list[int]]:
    """Runs of active frames as [start, length] pairs."""
    active = np.asarray(values) > 0.5
    padded = np.concatenate([[False], active, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [[int(s), int(e - s)] for s, e in zip(edges[::2], edges[1::2])]


def rle_to_mask(runs, num_frames: int) -> np.ndarray:
    out = np.zeros(num_frames)
    for start, length in runs:
        out[start:start + length] = 1.0
    return out


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def write_corpus(corpus: Sequence[Utterance], out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for utt in corpus:
            rel = f"wav/{utt.id}.wav"
            save_wav(out_dir / rel, utt.audio)
            utt.audio_path = rel
            fh.write(_dump({
                "id": utt.id,
                "audio_path": rel,
                "speaker_id": utt.speaker_id,
                "transcript": " ".join(utt.transcript),
                "alignments": [[w, s, e] for w, s, e in utt.word_alignments],
            }) + "\n")
    return manifest


def read_corpus(manifest) -> list[Utterance]:
    manifest = Path(manifest)
    corpus = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                path = manifest.parent / row["audio_path"]
                corpus.append(Utterance(
                    id=row["id"],
                    audio=load_wav(path),
                    speaker_id=row["speaker_id"],
                    transcript=row["transcript"].split(),
                    word_alignments=[(w, float(s), float(e)) for w, s, e in row.get("alignments", [])],
                    audio_path=row["audio_path"],
                ))
            except (KeyError, ValueError, TypeError) as err:
                raise SimulationError(f"{manifest}:{lineno}: bad corpus entry ({err})") from err
    return corpus


def write_mixtures(examples: Sequence[MixtureExample], out_dir, labels: dict[str, dict[str, list[int]]] | None = None,
                   name: str = "mixtures.jsonl") -> Path:
    """Mixture WAVs, run-length masks and a JSON-lines manifest.

    Mixtures whose peak exceeds full scale are written divided by their peak;
    the divisor is stored as ``wav_scale`` so loading restores the sum.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / name
    with open(manifest, "w") as fh:
        for ex in examples:
            scale = max(1.0, ex.mixture.peak)
            wav_rel, mask_rel = f"wav/{ex.id}.wav", f"masks/{ex.id}.json"
            save_wav(out_dir / wav_rel, ex.mixture, scale)
            with open(out_dir / mask_rel, "w") as mh:
                mh.write(_dump({
                    "frame_ms": MASK_FRAME_MS,
                    "num_frames": ex.num_frames,
                    "speakers": {spk: mask_to_rle(m.values) for spk, m in ex.speaker_masks.items()},
                }))
            row = {
                "id": ex.id,
                "audio_path": wav_rel,
                "case_kind": ex.case_kind,
                "sources": [{
                    "utt_id": s.utterance.id,
                    "speaker_id": s.utterance.speaker_id,
                    "offset_s": s.offset_s,
                    "gain": s.gain,
                    "transcript": " ".join(s.utterance.transcript),
                    "alignments": [[w, a, b] for w, a, b in s.utterance.word_alignments],
                } for s in ex.sources],
                "masks_path": mask_rel,
                "wav_scale": scale,
                "peak": ex.mixture.peak,
            }
            if labels is not None and ex.id in labels:
                row["labels"] = labels[ex.id]
            fh.write(_dump(row) + "\n")
    return manifest


def read_mixtures(manifest) -> list[MixtureExample]:
    manifest = Path(manifest)
    examples = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                mix = load_wav(manifest.parent / row["audio_path"])
                mix = AudioClip(mix.samples * float(row.get("wav_scale", 1.0)), mix.sample_rate_hz)
                sources = [Source(
                    Utterance(
                        id=s["utt_id"], audio=None, speaker_id=s["speaker_id"],
                        transcript=s.get("transcript", "").split(),
                        word_alignments=[(w, float(a), float(b)) for w, a, b in s.get("alignments", [])],
                    ),
                    float(s["offset_s"]), float(s["gain"]),
                ) for s in row["sources"]]
                with open(manifest.parent / row["masks_path"]) as mh:
                    masks = json.load(mh)
                speaker_masks = {
                    spk: MaskVector(rle_to_mask(runs, masks["num_frames"]), "binary")
                    for spk, runs in masks["speakers"].items()
                }
                meta = {"peak": row.get("peak")}
                if "labels" in row:
                    meta["labels"] = row["labels"]
                examples.append(MixtureExample(row["id"], mix, sources, row["case_kind"], speaker_masks, meta))
            except (KeyError, ValueError, TypeError, OSError) as err:
                raise SimulationError(f"{manifest}:{lineno}: bad mixture entry ({err})") from err
    return examples
