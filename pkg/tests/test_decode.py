import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spkmask.decode import (
    DiarizationAnnotation,
    DiarizationError,
    Hypothesis,
    decode_example,
    greedy_decode,
    hypothesis_to_diarization,
    mask_to_segments,
    read_hypotheses,
    read_rttm,
    reference_diarization,
    reference_hypothesis,
    segments_to_mask,
    write_hypotheses,
    write_rttm,
)
from spkmask.labels import Scheme, SpeakerBlock, Vocabulary
from spkmask.metrics import der
from spkmask.model import ModelConfig, build_model
from spkmask.signal import MaskVector
from spkmask.simulate import build_training_set, make_case2

from conftest import alpha_utterance


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(max_speakers=2, max_s=2.0, charset="ab ")


@pytest.fixture(scope="module")
def model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), num_encoder_blocks=1, num_decoder_blocks=1, hidden_dim=16,
                      num_heads=2, num_mels=8, max_frames=16, max_tokens=24)
    return build_model(cfg).eval()


def feats(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(1, model.config.input_frames, model.config.num_mels, generator=g)


def run_oracle(values, threshold, min_frames):
    """Run-length grouping by a plain loop."""
    out, start = [], None
    for i, v in enumerate(list(values) + [-1.0]):
        if v >= threshold and start is None:
            start = i
        elif v < threshold and start is not None:
            if i - start >= min_frames:
                out.append((start, i))
            start = None
    return out


class TestMaskToSegments:
    def test_all_low(self):
        assert mask_to_segments(MaskVector(np.full(50, 0.1), "probability")) == []

    def test_single_run(self):
        m = np.zeros(50)
        m[10:25] = 0.9
        assert mask_to_segments(m) == [(0.2, 0.5)]

    def test_short_runs_dropped(self):
        m = np.zeros(30)
        m[[3, 7, 20]] = 0.9
        m[10:14] = 0.9
        assert mask_to_segments(m, min_dur_s=0.06) == [(0.2, 0.28)]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), max_size=80), st.integers(0, 4))
    def test_run_length_oracle(self, values, min_frames):
        got = mask_to_segments(np.array(values), 0.5, min_frames * 0.02)
        expected = [(round(a * 0.02, 6), round(b * 0.02, 6)) for a, b in run_oracle(values, 0.5, min_frames)]
        assert got == expected

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=80))
    def test_round_trip(self, values):
        m = np.array(values)
        back = segments_to_mask(mask_to_segments(m), len(m))
        assert np.array_equal(back, (m >= 0.5).astype(float))


class TestDiarization:
    def test_timestamps(self):
        hyp = Hypothesis("x", Scheme.SPK_TS_2, [], [SpeakerBlock(1, ["a"], 0.0, 3.0)])
        ann = hypothesis_to_diarization(hyp, "timestamps")
        assert ann.segments == [("spk1", 0.0, 3.0)]

    def test_timestamps_need_scheme(self):
        hyp = Hypothesis("x", Scheme.SPK, [], [SpeakerBlock(1, ["a"])])
        with pytest.raises(DiarizationError):
            hypothesis_to_diarization(hyp, "timestamps")

    def test_mask_two_runs(self):
        m = np.zeros(100)
        m[0:20] = m[50:70] = 1.0
        hyp = Hypothesis("x", Scheme.SPK, [], [SpeakerBlock(1, ["a"])], {1: MaskVector(m, "probability")})
        ann = hypothesis_to_diarization(hyp, "mask")
        assert ann.segments == [("spk1", 0.0, 0.4), ("spk1", 1.0, 1.4)]

    def test_mask_needs_masks(self):
        hyp = Hypothesis("x", Scheme.SPK, [], [SpeakerBlock(1, ["a"])])
        with pytest.raises(DiarizationError):
            hypothesis_to_diarization(hyp, "mask")

    def test_unknown_mode(self):
        with pytest.raises(DiarizationError):
            hypothesis_to_diarization(Hypothesis("x", Scheme.SPK, [], []), "magic")

    def test_ground_truth_masks_give_zero_der(self, toy_corpus):
        v = Vocabulary(max_s=30.0)
        for ex in build_training_set(toy_corpus, {"case1": 1, "case2": 1}, seed=2)[::5]:
            hyp = reference_hypothesis(ex, v, "SPK")
            result = der(reference_diarization(ex), hypothesis_to_diarization(hyp, "mask"))
            assert result.der == 0.0

    def test_timestamps_miss_case2_gap(self):
        a1 = alpha_utterance("a1", "A", 3.0, ["ab"])
        b = alpha_utterance("b", "B", 4.0, ["ba"], 330)
        a2 = alpha_utterance("a2", "A", 3.0, ["aa"], 210)
        ex = make_case2(a1, b, a2, 1.0, 1.0)
        v = Vocabulary(max_s=10.0)
        hyp = reference_hypothesis(ex, v, "SPK_TS_2")
        ann = hypothesis_to_diarization(hyp, "timestamps")
        assert ann.segments == [("spk1", 0.0, 8.0), ("spk2", 2.0, 6.0)]
        assert der(reference_diarization(ex), ann).der > 0.1

    def test_annotation_merges(self):
        ann = DiarizationAnnotation([("a", 0.0, 1.0), ("a", 0.5, 2.0), ("b", 1.0, 1.0)])
        assert ann.segments == [("a", 0.0, 2.0)]


class TestGreedy:
    def test_deterministic(self, model, vocab):
        x = feats(model)
        a = greedy_decode(model, x, vocab, 20)
        assert a == greedy_decode(model, x, vocab, 20)
        assert 1 <= len(a) <= 20

    def test_max_len_one(self, model, vocab):
        assert len(greedy_decode(model, feats(model), vocab, 1)) == 1

    def test_never_exceeds_model_limit(self, model, vocab):
        assert len(greedy_decode(model, feats(model), vocab, 1000)) <= model.config.max_tokens

    def test_ties_go_to_lowest_id(self, vocab):
        cfg = ModelConfig(vocab_size=len(vocab), num_encoder_blocks=1, num_decoder_blocks=1, hidden_dim=8,
                          num_heads=2, num_mels=8, max_frames=16, max_tokens=8)
        m = build_model(cfg).eval()
        with torch.no_grad():
            m.output.weight.zero_()
            m.output.bias.zero_()
        assert greedy_decode(m, feats(m), vocab, 5) == [0] * 5

    def test_stops_at_eot(self, vocab):
        cfg = ModelConfig(vocab_size=len(vocab), num_encoder_blocks=1, num_decoder_blocks=1, hidden_dim=8,
                          num_heads=2, num_mels=8, max_frames=16, max_tokens=8)
        m = build_model(cfg).eval()
        with torch.no_grad():
            m.output.weight.zero_()
            m.output.bias.zero_()
            m.output.bias[vocab.eot_id] = 1.0
        assert greedy_decode(m, feats(m), vocab, 5) == [vocab.eot_id]

    def test_training_mode_rejected(self, model, vocab):
        model.train()
        try:
            with pytest.raises(RuntimeError, match="eval mode"):
                greedy_decode(model, feats(model), vocab)
        finally:
            model.eval()

    def test_masks_only_for_emitted_speakers(self, vocab):
        cfg = ModelConfig(vocab_size=len(vocab), num_encoder_blocks=1, num_decoder_blocks=1, hidden_dim=8,
                          num_heads=2, num_mels=8, max_frames=16, max_tokens=8)
        m = build_model(cfg).eval()
        with torch.no_grad():
            m.output.weight.zero_()
            m.output.bias.zero_()
            m.output.bias[vocab.speaker_token(2)] = 1.0
        hyp = decode_example(m, feats(m), vocab, "SPK", "x", max_len=3)
        assert hyp.tokens == [vocab.speaker_token(2)] * 3
        assert list(hyp.masks) == [2]
        assert len(hyp.masks[2]) == 16


class TestIO:
    def test_rttm_round_trip(self, tmp_path):
        anns = {"u1": DiarizationAnnotation([("spk1", 0.0, 1.5), ("spk2", 1.0, 2.25)]),
                "u2": DiarizationAnnotation([("A", 0.5, 0.75)])}
        write_rttm(tmp_path / "x.rttm", anns)
        back = read_rttm(tmp_path / "x.rttm")
        assert {k: v.segments for k, v in back.items()} == {k: v.segments for k, v in anns.items()}

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "bad.rttm"
        p.write_text("SPEAKER u 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER u 1 zero 1.0 <NA> <NA> a\n")
        with pytest.raises(DiarizationError, match=r"bad.rttm:2"):
            read_rttm(p)

    def test_hypotheses_round_trip(self, tmp_path):
        hyp = Hypothesis("x", Scheme.SPK_TS_1, [3, 4], [SpeakerBlock(1, ["ab"], 0.0, 0.5), SpeakerBlock(None, ["b"])],
                         {1: MaskVector([0.25, 0.75], "probability")}, 2)
        write_hypotheses(tmp_path / "h.json", [hyp])
        (back,) = read_hypotheses(tmp_path / "h.json")
        assert back.blocks == hyp.blocks and back.tokens == hyp.tokens
        assert back.masks[1].values.tolist() == [0.25, 0.75]
        assert back.malformed_token_count == 2
        assert back.words_by_speaker() == {"spk1": ["ab"], "anon": ["b"]}
