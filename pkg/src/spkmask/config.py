"""Run configuration: one YAML/JSON file plus ``section.key=value`` overrides, validated up front."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .simulate import DEFAULT_TOY_VOCAB


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    work_dir: str = "runs/toy"
    corpus_manifest: str | None = None
    mixture_manifest: str | None = None
    checkpoint: str | None = None
    metrics_log: str | None = None
    hypotheses: str | None = None
    hyp_rttm: str | None = None
    ref_rttm: str | None = None
    report: str | None = None

    def resolve(self, name: str) -> Path:
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        root = Path(self.work_dir)
        return {
            "corpus_manifest": root / "corpus" / "corpus.jsonl",
            "mixture_manifest": root / "mixtures" / "mixtures.jsonl",
            "checkpoint": root / "model.ckpt",
            "metrics_log": root / "metrics.jsonl",
            "hypotheses": root / "decode" / "hypotheses.json",
            "hyp_rttm": root / "decode" / "hyp.rttm",
            "ref_rttm": root / "mixtures" / "ref.rttm",
            "report": root / "report.json",
        }[name]


@dataclass
class CorpusSection:
    num_speakers: int = 2
    utts_per_speaker: int = 8
    vocab: list[str] = field(default_factory=lambda: list(DEFAULT_TOY_VOCAB))
    word_dur_s: float = 0.25
    words_per_utt: list[int] = field(default_factory=lambda: [3, 6])


@dataclass
class SimulateSection:
    mode: str = "train"  # train | eval
    ratio: dict[str, int] = field(default_factory=lambda: {"original": 1, "case1": 1})
    sir_db: float = 0.0
    overlap_range_s: list[float] = field(default_factory=lambda: [0.0, 5.0])
    eval_case: str = "case1"
    eval_overlap_s: float = 1.0
    vad_threshold_db: float = -40.0


@dataclass
class FeaturesSection:
    num_mels: int = 16
    window_ms: float = 25.0
    stride_ms: float = 10.0


@dataclass
class LabelsSection:
    scheme: str = "SPK"
    max_speakers: int = 4
    max_s: float = 5.12


@dataclass
class ModelSection:
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    max_frames: int = 256
    max_tokens: int = 160
    mask_variant: str = "L_FC"
    dropout_mask_cnn: float = 0.25


@dataclass
class TrainSection:
    lam: float = 0.5
    lr_init: float = 2e-3
    lr_min: float = 1e-5
    restart_period_steps: int | None = None
    epochs: int = 40
    max_steps: int | None = None
    batch_size: int = 8
    deterministic: bool = True
    grad_clip: float | None = 1.0
    checkpoint_every: int | None = None


@dataclass
class DecodeSection:
    max_len: int = 160
    diarization: str = "mask"  # mask | timestamps
    threshold: float = 0.5
    min_dur_s: float = 0.0
    oracle: bool = False


@dataclass
class ScoringSection:
    collar_s: float = 0.2
    plots: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    labels: LabelsSection = field(default_factory=LabelsSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(where: str, value: Any, annotation: str) -> Any:
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{where}: null not allowed")
    base = annotation.replace(" | None", "")
    if base == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if base == "int" and isinstance(value, int) and not isinstance(value, bool):
        return value
    if base == "bool" and isinstance(value, bool):
        return value
    if base == "str" and isinstance(value, str):
        return value
    if base.startswith("list") and isinstance(value, list):
        return value
    if base.startswith("dict") and isinstance(value, dict):
        return value
    raise ConfigError(f"{where}: expected {base}, got {type(value).__name__} ({value!r})")


def _merge(section, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(section)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key}: expected a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(section, key, _check_type(f"{where}{key}", value, str(known[key].type)))


def _validate(cfg: RunConfig) -> None:
    if cfg.simulate.mode not in ("train", "eval"):
        raise ConfigError(f"simulate.mode must be 'train' or 'eval', got {cfg.simulate.mode!r}")
    if cfg.decode.diarization not in ("mask", "timestamps"):
        raise ConfigError(f"decode.diarization must be 'mask' or 'timestamps', got {cfg.decode.diarization!r}")
    if cfg.labels.scheme not in ("SPK", "SPK_TS_1", "SPK_TS_2"):
        raise ConfigError(f"labels.scheme must be SPK, SPK_TS_1 or SPK_TS_2, got {cfg.labels.scheme!r}")
    if not 0.0 <= cfg.train.lam <= 1.0:
        raise ConfigError(f"train.lam must lie in [0, 1], got {cfg.train.lam}")
    if cfg.scoring.collar_s < 0:
        raise ConfigError("scoring.collar_s must be non-negative")
    if cfg.model.mask_variant not in ("L_FC", "L_FC_CNN", "CA_FC", "CA_FC_CNN"):
        raise ConfigError(f"unknown model.mask_variant {cfg.model.mask_variant!r}")
    if len(cfg.simulate.overlap_range_s) != 2 or cfg.simulate.overlap_range_s[0] < 0:
        raise ConfigError("simulate.overlap_range_s must be [low, high] with low >= 0")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the config file, then overrides (later wins)."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: cannot parse config ({err})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data, "")
    for text in overrides:
        keys, value = parse_override(text)
        nested: Any = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested, "")
    _validate(cfg)
    return cfg
