import json
import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spkmask.labels import Vocabulary
from spkmask.model import ModelConfig, asr_loss, build_model, combined_loss, load_checkpoint, mask_loss
from spkmask.simulate import build_training_set, gen_toy_corpus
from spkmask.train import (
    AdamState,
    PreparedExample,
    TrainConfig,
    adam_step,
    batch_loss,
    collate,
    lr_at,
    prepare,
    train_run,
)
from spkmask.signal import FeatureConfig


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(max_speakers=3, max_s=5.12)


@pytest.fixture(scope="module")
def tiny_examples():
    corpus = gen_toy_corpus(2, 2, seed=0, words_per_utt=(1, 2))
    return build_training_set(corpus, {"original": 1, "case1": 1}, seed=0)


def tiny_config(vocab, variant="L_FC"):
    return ModelConfig(vocab_size=len(vocab), num_encoder_blocks=1, num_decoder_blocks=1, hidden_dim=16,
                       num_heads=2, num_mels=8, max_frames=64, max_tokens=48, mask_variant=variant,
                       cnn_channels=(4, 8))


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 1e-4, 1e-8, 100) == 1e-4
        assert lr_at(50, 1e-4, 1e-8, 100) == pytest.approx((1e-4 + 1e-8) / 2, rel=1e-12)
        assert lr_at(99, 1e-4, 1e-8, 100) == pytest.approx(1e-8 + 0.5 * (1e-4 - 1e-8) * (1 - math.cos(math.pi / 100)), rel=1e-9)
        assert lr_at(100, 1e-4, 1e-8, 100) == 1e-4

    def test_end_of_period_approaches_min(self):
        assert lr_at(9999, 1.0, 0.0, 10000) < 1e-7

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10000), st.integers(1, 500))
    def test_periodic_and_bounded(self, step, period):
        lr = lr_at(step, 1e-3, 1e-6, period)
        assert 1e-6 <= lr <= 1e-3
        assert lr_at(step + period, 1e-3, 1e-6, period) == lr

    def test_bad_period(self):
        with pytest.raises(ValueError):
            lr_at(0, 1.0, 0.1, 0)


def scalar_adam(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, used as an independent reference."""
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


class TestAdam:
    def test_zero_gradient(self):
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        state = AdamState()
        adam_step([p], [torch.tensor([0.5, 0.5], dtype=torch.float64)], state, 0.1)
        before = p.clone()
        m_before = state.slots[0]["m"].clone()
        adam_step([p], [torch.zeros(2, dtype=torch.float64)], state, 0.0)
        assert torch.equal(p, before)
        assert torch.allclose(state.slots[0]["m"], 0.9 * m_before)
        fresh = torch.tensor([3.0], dtype=torch.float64)
        adam_step([fresh], [torch.zeros(1, dtype=torch.float64)], AdamState(), 0.1)
        assert fresh.item() == 3.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.booleans())
    def test_first_step_is_sign(self, mag, neg):
        g = -mag if neg else mag
        p = torch.tensor([0.0], dtype=torch.float64)
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], AdamState(), 0.01)
        assert p.item() == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-4)

    def test_quadratic_converges(self):
        p = torch.tensor([1.0], dtype=torch.float64)
        state = AdamState()
        for step in range(500):
            adam_step([p], [2 * p.clone()], state, lr_at(step, 0.05, 0.0, 500))
        assert abs(p.item()) < 1e-3
        # the same run through the scalar reference
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 501):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= lr_at(t - 1, 0.05, 0.0, 500) * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.item() == pytest.approx(x, abs=1e-12)

    def test_matches_scalar_reference_constant_lr(self):
        p = torch.tensor([2.5], dtype=torch.float64)
        state = AdamState()
        for _ in range(50):
            adam_step([p], [torch.cos(p.clone())], state, 0.03)
        assert p.item() == pytest.approx(scalar_adam(2.5, math.cos, 0.03, 50), rel=1e-12)

    def test_none_gradient_skipped(self):
        p = torch.tensor([1.0])
        state = AdamState()
        adam_step([p], [None], state, 0.1)
        assert p.item() == 1.0 and not state.slots

    def test_nonfinite_aborts(self):
        a, b = torch.tensor([1.0]), torch.tensor([1.0])
        with pytest.raises(FloatingPointError, match="parameter 1"):
            adam_step([a, b], [torch.tensor([1.0]), torch.tensor([float("nan")])], AdamState(), 0.1)
        assert a.item() == 1.0


class TestConfig:
    def test_lambda_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=1.2)

    def test_lr_order(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_init=1e-5, lr_min=1e-4)

    def test_scheme(self):
        with pytest.raises(ValueError):
            TrainConfig(scheme="NOPE")


class TestBatching:
    def test_collate_shift_and_pad(self, vocab):
        a = PreparedExample("a", np.zeros((4, 2)), [1, 5, 6, 2], [])
        b = PreparedExample("b", np.ones((4, 2)), [1, 5, 2], [])
        feats, inputs, targets = collate([a, b], vocab.pad_id)
        assert feats.shape == (2, 4, 2)
        assert inputs.tolist() == [[1, 5, 6], [1, 5, 0]]
        assert targets.tolist() == [[5, 6, 2], [5, 2, 0]]

    def test_batch_loss_matches_per_example_oracle(self, vocab, tiny_examples):
        cfg = tiny_config(vocab)
        prepared = prepare(tiny_examples[:3] + tiny_examples[-2:], vocab, "SPK", cfg, FeatureConfig(num_mels=8))
        model = build_model(cfg, torch.float64).eval()
        lam = 0.3
        loss, stats = batch_loss(model, prepared, vocab, lam)
        per_example = []
        for p in prepared:
            seq = torch.tensor(p.tokens)
            enc = model.encode(torch.tensor(p.features)[None])
            logits, hidden = model.decode(enc, seq[:-1][None])
            asr = asr_loss(logits[0], seq[1:]).item()
            masks = []
            for pos, tok in enumerate(seq[1:].tolist()):
                if vocab.is_speaker(tok):
                    prob = model.masks(hidden[0, pos][None], enc)[0].detach().numpy()
                    masks.append(mask_loss(prob, p.masks[vocab.speaker_index(tok) - 1]))
            per_example.append(combined_loss(asr, masks, lam))
        assert loss.item() == pytest.approx(np.mean(per_example), rel=1e-10)
        assert stats["gated"] == 3 + 2 * 2


class TestTrainRun:
    def test_deterministic_replay(self, vocab, tiny_examples):
        cfg = TrainConfig(lam=0.5, lr_init=1e-3, lr_min=1e-5, max_steps=6, batch_size=3, seed=4)
        a = train_run(tiny_examples, tiny_config(vocab, "L_FC_CNN"), cfg, vocab)
        b = train_run(tiny_examples, tiny_config(vocab, "L_FC_CNN"), cfg, vocab)
        assert [r["combined"] for r in a.metrics] == [r["combined"] for r in b.metrics]
        assert len(a.metrics) == 6

    def test_lambda_zero_ignores_mask_branch(self, vocab, tiny_examples):
        cfg = TrainConfig(lam=0.0, lr_init=1e-3, lr_min=1e-5, max_steps=5, batch_size=4)
        traces = []
        for variant in ("L_FC", "CA_FC_CNN"):
            res = train_run(tiny_examples, tiny_config(vocab, variant), cfg, vocab)
            traces.append([r["combined"] for r in res.metrics])
            assert all(r["combined"] == r["asr_loss"] for r in res.metrics)
        assert traces[0] == traces[1]

    def test_mask_branch_frozen_without_speaker_tokens(self, vocab, caplog):
        cfg = tiny_config(vocab, "CA_FC_CNN")
        text = vocab.encode_text("ba ta")
        rng = np.random.default_rng(0)
        prepared = [PreparedExample(f"x{i}", rng.normal(size=(cfg.input_frames, 8)),
                                    [vocab.sot_id, *text, vocab.eot_id], [np.ones(cfg.max_frames)])
                    for i in range(4)]
        initial = [p.detach().clone() for p in build_model(cfg).mask_parameters()]
        with caplog.at_level(logging.WARNING):
            res = train_run(None, cfg, TrainConfig(lam=0.5, lr_init=1e-2, max_steps=3, batch_size=2), vocab,
                            prepared=prepared)
        after = res.model.mask_parameters()
        assert all(torch.equal(a, b) for a, b in zip(initial, after))
        assert "no speaker tokens" in caplog.text
        main_changed = any(not torch.equal(a, b) for a, b in zip(build_model(cfg).parameters(),
                                                                   res.model.parameters()))
        assert main_changed

    def test_metrics_and_checkpoint(self, vocab, tiny_examples, tmp_path):
        cfg = TrainConfig(lam=0.5, lr_init=1e-3, max_steps=4, batch_size=4, checkpoint_every=2)
        res = train_run(tiny_examples, tiny_config(vocab), cfg, vocab, metrics_path=tmp_path / "m.jsonl",
                        checkpoint_path=tmp_path / "model.ckpt")
        rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert set(rows[0]) == {"step", "lr", "asr_loss", "mask_loss", "combined"}
        model, extra = load_checkpoint(tmp_path / "model.ckpt")
        assert extra["step"] == 4 and extra["lam"] == 0.5
        assert all(torch.equal(a, b) for a, b in zip(model.parameters(), res.model.parameters()))

    def test_restart_period_defaults_to_epoch(self, vocab, tiny_examples):
        cfg = TrainConfig(lam=0.5, lr_init=1e-3, lr_min=0.0, max_steps=4, batch_size=4)
        res = train_run(tiny_examples, tiny_config(vocab), cfg, vocab)
        # 8 examples in batches of 4 -> period 2
        assert [r["lr"] for r in res.metrics] == pytest.approx([1e-3, 5e-4, 1e-3, 5e-4])

    def test_empty(self, vocab):
        with pytest.raises(ValueError, match="empty"):
            train_run([], tiny_config(vocab), TrainConfig(), vocab)

    def test_label_too_long(self, vocab, tiny_examples):
        cfg = tiny_config(vocab)
        cfg.max_tokens = 4
        with pytest.raises(ValueError, match="max_tokens"):
            prepare(tiny_examples, vocab, "SPK", cfg, FeatureConfig(num_mels=8))
