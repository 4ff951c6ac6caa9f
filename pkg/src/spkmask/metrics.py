"""WER, permutation-optimal multi-talker WER, collar DER with optimal speaker mapping, and SCA."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_word_count: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_word_count == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_word_count

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions, self.insertions + other.insertions,
                            self.deletions + other.deletions, self.ref_word_count + other.ref_word_count)

    def to_json(self) -> dict:
        return {**asdict(self), "wer": self.wer}


@dataclass
class DerBreakdown:
    missed_s: float
    false_alarm_s: float
    confusion_s: float
    scored_ref_s: float

    @property
    def errors_s(self) -> float:
        return self.missed_s + self.false_alarm_s + self.confusion_s

    @property
    def der(self) -> float:
        if self.scored_ref_s <= 0:
            return 0.0 if self.errors_s <= 1e-12 else float("inf")
        return self.errors_s / self.scored_ref_s

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(self.missed_s + other.missed_s, self.false_alarm_s + other.false_alarm_s,
                            self.confusion_s + other.confusion_s, self.scored_ref_s + other.scored_ref_s)

    def to_json(self) -> dict:
        return {**asdict(self), "der": self.der}


@dataclass(frozen=True)
class ScoringConfig:
    collar_s: float = 0.2
    frame_s: float = 0.01

    def __post_init__(self):
        if self.collar_s < 0:
            raise ValueError(f"collar must be non-negative, got {self.collar_s}")


def wer(ref_words: Sequence[str], hyp_words: Sequence[str]) -> WerBreakdown:
    """Levenshtein alignment with unit costs.

    S/I/D are read from a single minimal-cost backtrace that prefers
    substitution (or match), then insertion, then deletion on ties.
    """
    if len(ref_words) == 0:
        raise ValueError("reference must contain at least one word")
    return _edit(ref_words, hyp_words)


def _edit(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(diag, cost[i, j - 1] + 1, cost[i - 1, j] + 1)
    s = ins = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return WerBreakdown(int(s), ins, d, n)


def cp_wer(ref_by_speaker: Mapping[str, Sequence[str]] | Sequence[Sequence[str]],
           hyp_by_speaker: Mapping[str, Sequence[str]] | Sequence[Sequence[str]]) -> WerBreakdown:
    """Minimum total edit errors over one-to-one hypothesis/reference stream assignments.

    Unassigned hypothesis streams count as insertions, unassigned reference
    streams as deletions. Exhaustive over assignments.
    """
    refs = list(ref_by_speaker.values()) if isinstance(ref_by_speaker, Mapping) else list(ref_by_speaker)
    hyps = list(hyp_by_speaker.values()) if isinstance(hyp_by_speaker, Mapping) else list(hyp_by_speaker)
    if not refs:
        raise ValueError("need at least one reference speaker")
    pair = [[_edit(r, h) for h in hyps] for r in refs]
    best = None
    slots = list(range(len(hyps))) + [None] * len(refs)
    for assign in set(itertools.permutations(slots, len(refs))):
        total = WerBreakdown(0, 0, 0, 0)
        for r, h in enumerate(assign):
            total += pair[r][h] if h is not None else WerBreakdown(0, 0, len(refs[r]), len(refs[r]))
        for h in set(range(len(hyps))) - set(assign):
            total += WerBreakdown(0, len(hyps[h]), 0, 0)
        key = (total.errors, total.substitutions)
        if best is None or key < best[0]:
            best = (key, total)
    return best[1]


def _segments(annotation) -> dict[str, list[tuple[float, float]]]:
    if hasattr(annotation, "by_speaker"):
        return annotation.by_speaker()
    out: dict[str, list[tuple[float, float]]] = {}
    for spk, start, end in annotation:
        out.setdefault(spk, []).append((start, end))
    return out


def _inside(t: float, spans: Sequence[tuple[float, float]]) -> bool:
    return any(s <= t < e for s, e in spans)


def best_mapping(overlap: np.ndarray) -> dict[int, int]:
    """Hypothesis -> reference index mapping maximizing total overlap; exhaustive search."""
    n_hyp, n_ref = overlap.shape
    best, best_map = -1.0, {}
    if n_hyp <= n_ref:
        for perm in itertools.permutations(range(n_ref), n_hyp):
            total = sum(overlap[h, r] for h, r in enumerate(perm))
            if total > best + 1e-12:
                best, best_map = total, dict(enumerate(perm))
    else:
        for perm in itertools.permutations(range(n_hyp), n_ref):
            total = sum(overlap[h, r] for r, h in enumerate(perm))
            if total > best + 1e-12:
                best, best_map = total, {h: r for r, h in enumerate(perm)}
    return best_map


def der(ref, hyp, config: ScoringConfig = ScoringConfig()) -> DerBreakdown:
    """Diarization error rate over exact segment boundaries.

    Time within ``collar_s`` of any reference segment boundary is not scored.
    Overlapped reference speech must be attributed to every active speaker.
    """
    ref_seg, hyp_seg = _segments(ref), _segments(hyp)
    if not any(ref_seg.values()):
        raise ValueError("reference annotation has no segments")
    ref_spk, hyp_spk = sorted(ref_seg), sorted(hyp_seg)
    boundaries = sorted({t for spans in ref_seg.values() for s, e in spans for t in (s, e)})
    c = config.collar_s
    no_score = [(b - c, b + c) for b in boundaries] if c > 0 else []
    cuts = {t for spans in list(ref_seg.values()) + list(hyp_seg.values()) for s, e in spans for t in (s, e)}
    cuts |= {t for lo, hi in no_score for t in (lo, hi)}
    cuts = sorted(cuts)
    pieces = []
    for t0, t1 in zip(cuts[:-1], cuts[1:]):
        if t1 <= t0:
            continue
        mid = 0.5 * (t0 + t1)
        if _inside(mid, no_score):
            continue
        r = [i for i, spk in enumerate(ref_spk) if _inside(mid, ref_seg[spk])]
        h = [i for i, spk in enumerate(hyp_spk) if _inside(mid, hyp_seg[spk])]
        if r or h:
            pieces.append((t1 - t0, r, h))
    overlap = np.zeros((len(hyp_spk), len(ref_spk)))
    for dur, r, h in pieces:
        for hi in h:
            for ri in r:
                overlap[hi, ri] += dur
    mapping = best_mapping(overlap) if len(hyp_spk) and len(ref_spk) else {}
    miss = fa = conf = scored = 0.0
    for dur, r, h in pieces:
        n_ref, n_hyp = len(r), len(h)
        correct = sum(1 for hi in h if mapping.get(hi) in r)
        miss += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        conf += dur * (min(n_ref, n_hyp) - correct)
        scored += dur * n_ref
    return DerBreakdown(miss, fa, conf, scored)


def sca(ref_speaker_count: int, hyp_speaker_count: int) -> bool:
    return ref_speaker_count == hyp_speaker_count


def sca_percent(pairs: Sequence[tuple[int, int]]) -> float:
    if not pairs:
        return 0.0
    return 100.0 * sum(sca(r, h) for r, h in pairs) / len(pairs)


def score_corpus(items: Sequence[dict], config: ScoringConfig = ScoringConfig(), meta: dict | None = None) -> dict:
    """Per-utterance and corpus-level WER/DER/SCA.

    Each item holds ``id``, ``ref_words`` and ``hyp_words`` (speaker -> words),
    ``ref_diarization`` and optionally ``hyp_diarization`` annotations, and the
    reference/hypothesis speaker counts.
    """
    rows = []
    total_wer = WerBreakdown(0, 0, 0, 0)
    total_der = DerBreakdown(0.0, 0.0, 0.0, 0.0)
    scored_der = False
    pairs = []
    for item in items:
        w = cp_wer(item["ref_words"], item["hyp_words"])
        total_wer += w
        row = {"id": item["id"], "wer": w.to_json(), "ref_speakers": item["ref_count"],
               "hyp_speakers": item["hyp_count"], "sca_correct": sca(item["ref_count"], item["hyp_count"])}
        if item.get("hyp_diarization") is not None:
            d = der(item["ref_diarization"], item["hyp_diarization"], config)
            total_der += d
            scored_der = True
            row["der"] = d.to_json()
        pairs.append((item["ref_count"], item["hyp_count"]))
        rows.append(row)
    corpus = {"wer": total_wer.to_json(), "sca": sca_percent(pairs), "utterances": len(rows)}
    if scored_der:
        corpus["der"] = total_der.to_json()
    return {"meta": {"collar_s": config.collar_s, **(meta or {})}, "corpus": corpus, "utterances": rows}
