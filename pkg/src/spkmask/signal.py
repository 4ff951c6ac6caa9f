"""Audio primitives: WAV I/O, power, SIR-controlled mixing, log-Mel features and energy VAD."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SAMPLE_RATE = 16000
MASK_FRAME_MS = 20


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio samples must be finite")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0


@dataclass
class MaskVector:
    """Per-frame speaker activity: binary targets or predicted probabilities."""

    values: np.ndarray
    kind: str = "binary"
    frame_ms: int = MASK_FRAME_MS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind == "binary":
            if not np.all((self.values == 0) | (self.values == 1)):
                raise ValueError("binary mask values must be 0 or 1")
        elif self.kind == "probability":
            if not np.all((self.values >= 0) & (self.values <= 1)):
                raise ValueError("probability mask values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = SAMPLE_RATE
    window_ms: float = 25.0
    stride_ms: float = 10.0
    num_mels: int = 80
    n_fft: int | None = None
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    eps: float = 1e-10

    @property
    def window(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def stride(self) -> int:
        return int(round(self.sample_rate_hz * self.stride_ms / 1000))

    @property
    def fft_size(self) -> int:
        if self.n_fft is not None:
            return self.n_fft
        return 1 << (self.window - 1).bit_length()


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_stride_ms: float = 10.0
    window_ms: float = 25.0

    @property
    def num_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def load_wav(path) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    with wave.open(str(path), "rb") as fh:
        channels = fh.getnchannels()
        width = fh.getsampwidth()
        rate = fh.getframerate()
        if fh.getcomptype() != "NONE":
            raise AudioError(f"{path}: unsupported encoding {fh.getcomptype()}")
        if channels != 1:
            raise AudioError(f"{path}: unsupported channel count {channels}")
        if width != 2:
            raise AudioError(f"{path}: unsupported sample width {8 * width} bits")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(pcm / 32768.0, rate)


def save_wav(path, clip: AudioClip, scale: float = 1.0) -> None:
    """Write 16-bit PCM; samples are divided by ``scale`` first and clipped to full scale."""
    pcm = np.clip(np.round(clip.samples / scale * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def mean_power(clip: AudioClip | np.ndarray) -> float:
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if samples.size == 0:
        raise AudioError("mean power of an empty clip is undefined")
    return float(np.mean(samples * samples))


def sir_gain(target_power: float, interference_power: float, sir_db: float) -> float:
    """Gain for the interference so that target/interference power equals ``sir_db``."""
    if target_power <= 0 or interference_power <= 0:
        raise AudioError(
            f"SIR gain needs positive powers, got target={target_power}, interference={interference_power}"
        )
    return math.sqrt(target_power / (interference_power * 10.0 ** (sir_db / 10.0)))


def mix_at_offsets(sources: Sequence[tuple[AudioClip, float, float]]) -> AudioClip:
    """Sum gain-scaled sources placed at their offsets (seconds). No clipping is applied."""
    if not sources:
        raise AudioError("nothing to mix")
    rate = sources[0][0].sample_rate_hz
    starts = []
    for clip, offset, _ in sources:
        if clip.sample_rate_hz != rate:
            raise AudioError(f"mismatched sample rates: {clip.sample_rate_hz} vs {rate}")
        if offset < 0:
            raise AudioError(f"negative offset {offset}")
        starts.append(int(round(offset * rate)))
    total = max(s + len(c) for s, (c, _, _) in zip(starts, sources))
    out = np.zeros(total)
    for start, (clip, _, gain) in zip(starts, sources):
        out[start:start + len(clip)] += gain * clip.samples
    return AudioClip(out, rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    """HTK-style triangular filters; returns (num_mels x bins weights, center frequencies)."""
    fmax = config.fmax_hz if config.fmax_hz is not None else config.sample_rate_hz / 2
    n_fft = config.fft_size
    bin_hz = np.arange(n_fft // 2 + 1) * config.sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(fmax), config.num_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def num_frames(num_samples: int, config: FeatureConfig) -> int:
    return (num_samples - config.window) // config.stride + 1


def log_mel(clip: AudioClip, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Raw (un-normalized) log-Mel magnitudes with floor framing, no centering."""
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise AudioError(f"expected {config.sample_rate_hz} Hz audio, got {clip.sample_rate_hz}")
    win, hop = config.window, config.stride
    if len(clip) < win:
        raise AudioError(f"clip of {len(clip)} samples is shorter than one {win}-sample window")
    n = num_frames(len(clip), config)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = clip.samples[idx] * np.hanning(win + 2)[1:-1]
    magnitude = np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1))
    weights, _ = mel_filterbank(config)
    mel = magnitude @ weights.T
    return FeatureMatrix(np.log(np.maximum(mel, config.eps)), config.stride_ms, config.window_ms)


def energy_vad(clip: AudioClip, frame_ms: int = MASK_FRAME_MS, threshold_db_rel: float = -40.0) -> MaskVector:
    """Frame is active iff its energy is within ``threshold_db_rel`` dB of the loudest frame."""
    if len(clip) == 0:
        raise AudioError("VAD of an empty clip")
    if threshold_db_rel >= 0:
        raise ValueError("threshold_db_rel must be negative")
    hop = int(round(clip.sample_rate_hz * frame_ms / 1000))
    count = -(-len(clip) // hop)
    padded = np.zeros(count * hop)
    padded[:len(clip)] = clip.samples
    # partial last frame is averaged over its real samples only
    lengths = np.full(count, hop, dtype=np.float64)
    lengths[-1] = len(clip) - (count - 1) * hop
    energy = (padded.reshape(count, hop) ** 2).sum(axis=1) / lengths
    peak = energy.max()
    if peak <= 0:
        return MaskVector(np.zeros(count), "binary", frame_ms)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(energy)
    active = db >= 10.0 * np.log10(peak) + threshold_db_rel
    return MaskVector(active.astype(np.float64), "binary", frame_ms)


def mask_frame_count(duration_s: float, frame_ms: int = MASK_FRAME_MS) -> int:
    # tolerate float noise in durations that are exact multiples of the frame
    return int(math.ceil(round(duration_s * 1000 / frame_ms, 6)))
