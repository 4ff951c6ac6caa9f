"""Encoder-decoder transformer with a speaker-mask branch, and its losses.

The mask branch is queried only at decoder positions whose target token is a
speaker token. It maps that position's final decoder state (``L_*`` variants)
or a cross-attention summary of the encoder (``CA_*`` variants) to one
activity probability per encoder frame.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

MASK_VARIANTS = ("L_FC", "L_FC_CNN", "CA_FC", "CA_FC_CNN")
PROB_CLIP = 1e-7


@dataclass
class ModelConfig:
    vocab_size: int
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    num_mels: int = 16
    max_frames: int = 256
    max_tokens: int = 160
    mask_variant: str = "L_FC"
    cnn_channels: tuple[int, int] = (32, 64)
    dropout_mask_cnn: float = 0.25
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        self.cnn_channels = tuple(self.cnn_channels)
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.mask_variant not in MASK_VARIANTS:
            raise ValueError(f"unknown mask variant {self.mask_variant!r}; expected one of {MASK_VARIANTS}")

    @property
    def input_frames(self) -> int:
        """Feature frames (10 ms) consumed per example; the front-end halves this to ``max_frames``."""
        return 2 * self.max_frames


def sinusoids(length: int, channels: int) -> torch.Tensor:
    half = channels // 2
    scale = math.log(10000) / max(half - 1, 1)
    inv = torch.exp(-scale * torch.arange(half, dtype=torch.float64))
    t = torch.arange(length, dtype=torch.float64)[:, None] * inv[None, :]
    out = torch.cat([torch.sin(t), torch.cos(t)], dim=1)
    if out.shape[1] < channels:
        out = F.pad(out, (0, channels - out.shape[1]))
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, memory=None, causal=False):
        memory = x if memory is None else memory
        b, lq, d = x.shape
        lk = memory.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.query(x).view(b, lq, h, dh).transpose(1, 2)
        k = self.key(memory).view(b, lk, h, dh).transpose(1, 2)
        v = self.value(memory).view(b, lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if causal:
            future = torch.ones(lq, lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, lq, d))


class Block(nn.Module):
    """Pre-norm transformer block; ``cross=True`` adds attention over encoder states."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, cross: bool = False):
        super().__init__()
        self.attn_ln = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.cross_ln = nn.LayerNorm(dim) if cross else None
        self.cross = MultiHeadAttention(dim, heads) if cross else None
        self.mlp_ln = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, x, memory=None, causal=False):
        x = x + self.attn(self.attn_ln(x), causal=causal)
        if self.cross is not None:
            x = x + self.cross(self.cross_ln(x), memory)
        return x + self.mlp(self.mlp_ln(x))


class MaskBranch(nn.Module):
    """Speaker-mask head in one of four layouts.

    ``L_FC``: FC(hidden -> D). ``L_FC_CNN``: FC, then two 2x1 convolutions
    (32 and 64 channels) over the frame axis, dropout, and a per-frame 64 -> 1
    projection. ``CA_*``: the same heads fed by a fresh cross-attention block
    whose query is the gated decoder state and whose keys/values are the
    encoder states. Output is a sigmoid probability per frame.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim, frames = config.hidden_dim, config.max_frames
        self.variant = config.mask_variant
        self.uses_cross_attention = self.variant.startswith("CA_")
        self.uses_cnn = self.variant.endswith("_CNN")
        if self.uses_cross_attention:
            self.query_ln = nn.LayerNorm(dim)
            self.memory_ln = nn.LayerNorm(dim)
            self.cross = MultiHeadAttention(dim, config.num_heads)
        self.fc = nn.Linear(dim, frames)
        if self.uses_cnn:
            c1, c2 = config.cnn_channels
            # "same" padding for a 2x1 kernel: one zero frame appended after the last
            self.conv1 = nn.Conv2d(1, c1, kernel_size=(2, 1), stride=1)
            self.conv2 = nn.Conv2d(c1, c2, kernel_size=(2, 1), stride=1)
            self.dropout = nn.Dropout(config.dropout_mask_cnn)
            self.proj = nn.Linear(c2, 1)

    def logits(self, gated_hidden, encoder_states):
        """gated_hidden: (N, H); encoder_states: (N, D, H) -> (N, D) pre-sigmoid scores."""
        x = gated_hidden
        if self.uses_cross_attention:
            q = x[:, None, :]
            x = (q + self.cross(self.query_ln(q), self.memory_ln(encoder_states)))[:, 0, :]
        x = self.fc(x)
        if self.uses_cnn:
            y = F.gelu(self.conv1(F.pad(x[:, None, :, None], (0, 0, 0, 1))))
            y = self.dropout(F.gelu(self.conv2(F.pad(y, (0, 0, 0, 1)))))
            x = self.proj(y[..., 0].transpose(1, 2))[..., 0]
        return x

    def forward(self, gated_hidden, encoder_states):
        return torch.sigmoid(self.logits(gated_hidden, encoder_states))


class SpeakerMaskTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.hidden_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.conv1 = nn.Conv1d(config.num_mels, dim, kernel_size=3, padding=1)
            self.conv2 = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)
            self.encoder_blocks = nn.ModuleList(
                [Block(dim, config.num_heads, config.ffn_mult) for _ in range(config.num_encoder_blocks)])
            self.encoder_ln = nn.LayerNorm(dim)
            self.token_embedding = nn.Embedding(config.vocab_size, dim)
            self.position_embedding = nn.Parameter(0.02 * torch.randn(config.max_tokens, dim))
            self.decoder_blocks = nn.ModuleList(
                [Block(dim, config.num_heads, config.ffn_mult, cross=True) for _ in range(config.num_decoder_blocks)])
            self.decoder_ln = nn.LayerNorm(dim)
            self.output = nn.Linear(dim, config.vocab_size)
            self.mask_branch = MaskBranch(config)
        self.register_buffer("encoder_positions", sinusoids(config.max_frames, dim).float(), persistent=False)

    def encode(self, features):
        """features: (B, 2D, num_mels) -> encoder states (B, D, hidden)."""
        if features.dim() == 2:
            features = features[None]
        expected = (self.config.input_frames, self.config.num_mels)
        if tuple(features.shape[1:]) != expected:
            raise ValueError(f"features must be (batch, {expected[0]}, {expected[1]}), got {tuple(features.shape)}")
        x = F.gelu(self.conv1(features.transpose(1, 2)))
        x = F.gelu(self.conv2(x)).transpose(1, 2)
        x = x + self.encoder_positions.to(x.dtype)
        for block in self.encoder_blocks:
            x = block(x)
        return self.encoder_ln(x)

    def decode(self, encoder_states, tokens):
        """Teacher-forced decoder pass. tokens: (B, L) -> (logits (B, L, V), hidden (B, L, H))."""
        if tokens.dim() == 1:
            tokens = tokens[None]
        length = tokens.shape[1]
        if length > self.config.max_tokens:
            raise ValueError(f"{length} tokens exceed max_tokens={self.config.max_tokens}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary range")
        x = self.token_embedding(tokens) + self.position_embedding[:length]
        for block in self.decoder_blocks:
            x = block(x, encoder_states, causal=True)
        hidden = self.decoder_ln(x)
        return self.output(hidden), hidden

    def masks(self, gated_hidden, encoder_states):
        return self.mask_branch(gated_hidden, encoder_states)

    def forward(self, features, tokens):
        enc = self.encode(features)
        logits, hidden = self.decode(enc, tokens)
        return enc, logits, hidden

    def mask_parameters(self):
        return list(self.mask_branch.parameters())


def build_model(config: ModelConfig, dtype=torch.float32) -> SpeakerMaskTransformer:
    return SpeakerMaskTransformer(config).to(dtype)


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossBreakdown:
    asr_loss: float
    mask_losses: list[float]
    combined: float
    lam: float


def asr_loss(logits, targets, pad_id: int = 0):
    """Mean negative log-likelihood over non-PAD target positions of one sequence."""
    keep = targets != pad_id
    if not bool(keep.any()):
        raise ValueError("target sequence contains only PAD tokens")
    nll = -logits.log_softmax(dim=-1).gather(-1, targets[..., None])[..., 0]
    return nll[keep].mean()


def sequence_asr_losses(logits, targets, pad_id: int = 0):
    """Per-sequence mean NLL for a batch (B, L, V) / (B, L) -> (B,)."""
    keep = (targets != pad_id).to(logits.dtype)
    counts = keep.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("a target sequence contains only PAD tokens")
    nll = -logits.log_softmax(dim=-1).gather(-1, targets[..., None])[..., 0]
    return (nll * keep).sum(dim=1) / counts


def gate_positions(target_tokens: Sequence[int], vocab) -> list[tuple[int, int]]:
    """(position, speaker index) for every target position holding a speaker token."""
    return [(i, vocab.speaker_index(int(t))) for i, t in enumerate(target_tokens) if vocab.is_speaker(int(t))]


def mask_loss(prediction, target):
    """Average binary cross-entropy over the last axis, with probabilities clipped to [1e-7, 1 - 1e-7]."""
    if prediction.shape != target.shape:
        raise ValueError(f"mask length mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    if isinstance(prediction, torch.Tensor):
        p = prediction.clamp(PROB_CLIP, 1 - PROB_CLIP)
        y = target.to(p.dtype)
        return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean(dim=-1)
    p = np.clip(np.asarray(prediction, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    y = np.asarray(target, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def combined_loss(asr, mask_losses, lam: float):
    """(1 - lam) * asr + lam * sum(mask_losses)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    total = (1.0 - lam) * asr
    if len(mask_losses):
        return total + lam * sum(mask_losses[1:], mask_losses[0])
    return total


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPKMASK\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: SpeakerMaskTransformer, extra: dict | None = None) -> None:
    """Header (JSON: config, tensor names/dtypes/shapes) followed by raw little-endian tensor bytes."""
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(model.config),
                         "tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[SpeakerMaskTransformer, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + size])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    body = raw[16 + size:]
    config = ModelConfig(**header["config"])
    state = {}
    for entry in header["tensors"]:
        buf = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype("<" + entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = build_model(config, dtype)
    model.load_state_dict(state)
    model.eval()
    return model, header["extra"]
