"""Training loop: Adam, cosine annealing with warm restarts, padded batches and the gated multi-task loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .labels import Scheme, Vocabulary, build_label
from .model import (
    ModelConfig,
    SpeakerMaskTransformer,
    build_model,
    gate_positions,
    mask_loss,
    save_checkpoint,
    sequence_asr_losses,
)
from .signal import FeatureConfig, log_mel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr_init: float = 1e-4
    lr_min: float = 1e-8
    restart_period_steps: int | None = None
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    grad_clip: float | None = 1.0
    scheme: str = "SPK"
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        Scheme(self.scheme)


def lr_at(step: int, lr_init: float, lr_min: float, period: int) -> float:
    """Cosine annealing from ``lr_init`` to ``lr_min`` that restarts every ``period`` steps."""
    if period <= 0:
        raise ValueError(f"restart period must be positive, got {period}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    phase = (step % period) / period
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * phase))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    slots: dict = field(default_factory=dict)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState, lr: float):
    """One bias-corrected Adam update in place. Parameters whose gradient is None are left alone.

    Raises FloatingPointError, before touching anything, if any gradient is non-finite.
    """
    for i, g in enumerate(grads):
        if g is not None and not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for parameter {i}; step aborted")
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            slot = state.slots.setdefault(i, {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)})
            slot["step"] += 1
            t = slot["step"]
            slot["m"].mul_(b1).add_(g, alpha=1 - b1)
            slot["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = slot["m"] / (1 - b1 ** t)
            v_hat = slot["v"] / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return params, state


# ---------------------------------------------------------------------------
# batching

def example_features(example, model_config: ModelConfig, feature_config: FeatureConfig) -> np.ndarray:
    """Per-utterance standardized log-Mel frames, zero-padded or truncated to the model's input length."""
    feats = log_mel(example.mixture, feature_config).frames
    feats = (feats - feats.mean()) / (feats.std() + 1e-5)
    out = np.zeros((model_config.input_frames, feature_config.num_mels))
    n = min(len(feats), model_config.input_frames)
    out[:n] = feats[:n]
    return out


def example_masks(example, num_frames: int) -> list[np.ndarray]:
    """Mask targets indexed by FIFO speaker position, padded/truncated to ``num_frames``."""
    out = []
    for spk in example.speaker_order():
        values = example.speaker_masks[spk].values[:num_frames]
        out.append(np.pad(values, (0, num_frames - len(values))))
    return out


@dataclass
class PreparedExample:
    id: str
    features: np.ndarray
    tokens: list[int]
    masks: list[np.ndarray]


def prepare(examples, vocab: Vocabulary, scheme, model_config: ModelConfig,
            feature_config: FeatureConfig) -> list[PreparedExample]:
    out = []
    for ex in examples:
        tokens = build_label(ex, scheme, vocab).tokens
        if len(tokens) - 1 > model_config.max_tokens:
            raise ValueError(f"{ex.id}: label of {len(tokens)} tokens exceeds max_tokens={model_config.max_tokens}")
        out.append(PreparedExample(ex.id, example_features(ex, model_config, feature_config), tokens,
                                   example_masks(ex, model_config.max_frames)))
    return out


def collate(batch: Sequence[PreparedExample], pad_id: int, dtype=torch.float32):
    length = max(len(p.tokens) for p in batch) - 1
    inputs = torch.full((len(batch), length), pad_id, dtype=torch.long)
    targets = torch.full((len(batch), length), pad_id, dtype=torch.long)
    for b, p in enumerate(batch):
        seq = torch.tensor(p.tokens, dtype=torch.long)
        inputs[b, :len(seq) - 1] = seq[:-1]
        targets[b, :len(seq) - 1] = seq[1:]
    features = torch.tensor(np.stack([p.features for p in batch]), dtype=dtype)
    return features, inputs, targets


def batch_loss(model: SpeakerMaskTransformer, batch: Sequence[PreparedExample], vocab: Vocabulary, lam: float):
    """Mean over examples of (1 - lam) * asr + lam * sum of gated mask losses.

    Returns (loss tensor, stats dict). With ``lam == 0`` the mask branch is not run.
    """
    dtype = next(model.parameters()).dtype
    features, inputs, targets = collate(batch, vocab.pad_id, dtype)
    enc, logits, hidden = model(features, inputs)
    asr = sequence_asr_losses(logits, targets, vocab.pad_id)
    mask_sums = torch.zeros_like(asr)
    rows, cols, wanted = [], [], []
    for b, p in enumerate(batch):
        for pos, k in gate_positions(targets[b].tolist(), vocab):
            if k - 1 < len(p.masks):
                rows.append(b)
                cols.append(pos)
                wanted.append(p.masks[k - 1])
    if rows and lam > 0:
        rows_t = torch.tensor(rows)
        probs = model.masks(hidden[rows_t, torch.tensor(cols)], enc[rows_t])
        losses = mask_loss(probs, torch.tensor(np.stack(wanted), dtype=dtype))
        mask_sums = mask_sums.index_add(0, rows_t, losses)
    combined = (1.0 - lam) * asr + lam * mask_sums
    stats = {
        "asr_loss": float(asr.detach().mean()),
        "mask_loss": float(mask_sums.detach().mean()),
        "gated": len(rows),
    }
    return combined.mean(), stats


# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SpeakerMaskTransformer
    metrics: list[dict]


def train_run(examples, model_config: ModelConfig, train_config: TrainConfig, vocab: Vocabulary,
              feature_config: FeatureConfig | None = None, metrics_path=None, checkpoint_path=None,
              dtype=torch.float32, prepared: list[PreparedExample] | None = None) -> TrainResult:
    """Train from scratch and return the model with its per-step metrics.

    In deterministic mode the loss trace is a pure function of the inputs and seeds.
    """
    if not examples and not prepared:
        raise ValueError("training manifest is empty")
    feature_config = feature_config or FeatureConfig(num_mels=model_config.num_mels)
    if prepared is None:
        prepared = prepare(examples, vocab, train_config.scheme, model_config, feature_config)
    torch.manual_seed(train_config.seed)
    model = build_model(model_config, dtype)
    model.train()
    params = list(model.parameters())
    state = AdamState()
    rng = np.random.default_rng(train_config.seed)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(len(prepared) / bs)
    period = train_config.restart_period_steps or steps_per_epoch
    total = train_config.max_steps or train_config.epochs * steps_per_epoch
    metrics = []
    out = open(metrics_path, "w") if metrics_path else None
    step = 0
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(train_config.deterministic)
    try:
        while step < total:
            order = rng.permutation(len(prepared))
            for start in range(0, len(order), bs):
                if step >= total:
                    break
                batch = [prepared[i] for i in order[start:start + bs]]
                lr = lr_at(step, train_config.lr_init, train_config.lr_min, period)
                loss, stats = batch_loss(model, batch, vocab, train_config.lam)
                if stats["gated"] == 0 and train_config.lam > 0:
                    log.warning("step %d: batch has no speaker tokens; mask loss is empty", step)
                model.zero_grad(set_to_none=True)
                loss.backward()
                if train_config.grad_clip:
                    torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], train_config.grad_clip)
                adam_step(params, [p.grad for p in params], state, lr)
                row = {"step": step, "lr": lr, "asr_loss": stats["asr_loss"], "mask_loss": stats["mask_loss"],
                       "combined": float(loss.detach())}
                metrics.append(row)
                if out:
                    out.write(json.dumps(row) + "\n")
                step += 1
                if checkpoint_path and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, model, {"step": step, "scheme": train_config.scheme,
                                                             "lam": train_config.lam, "vocab": vocab.to_json()})
    finally:
        torch.use_deterministic_algorithms(was_deterministic)
        if out:
            out.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, {"step": step, "scheme": train_config.scheme,
                                                 "lam": train_config.lam, "vocab": vocab.to_json()})
    return TrainResult(model, metrics)
