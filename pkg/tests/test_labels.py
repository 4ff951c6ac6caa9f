import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkmask.labels import (
    LabelError,
    Scheme,
    Vocabulary,
    build_label,
    dequantize_time,
    parse_hypothesis,
    quantize_time,
)
from spkmask.simulate import make_case1, make_case2, make_original

from conftest import alpha_utterance


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="module")
def case2():
    a1 = alpha_utterance("a1", "A", 3.0, ["hello", "there"], 200)
    b = alpha_utterance("b", "B", 4.0, ["good", "day"], 330)
    a2 = alpha_utterance("a2", "A", 3.0, ["bye", "now"], 210)
    return make_case2(a1, b, a2, 1.0, 1.0)


def toks(vocab, *items):
    """Build a token list from readable items: ints are speakers, floats are times, str is text."""
    out = []
    for it in items:
        if isinstance(it, int):
            out.append(vocab.speaker_token(it))
        elif isinstance(it, float):
            out.append(vocab.timestamp_token(it))
        else:
            out += vocab.encode_text(it)
    return out


class TestQuantize:
    @pytest.mark.parametrize("t, idx", [(0.0, 0), (0.511, 26), (0.009, 0), (0.01, 1), (0.03, 2), (30.0, 1500)])
    def test_values(self, t, idx):
        assert quantize_time(t) == idx

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            quantize_time(-0.1)
        with pytest.raises(LabelError):
            quantize_time(31.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 30))
    def test_within_half_step(self, t):
        assert abs(dequantize_time(quantize_time(t)) - t) <= 0.01 + 1e-9


class TestVocabulary:
    def test_layout(self, vocab):
        assert vocab.decode([0, 1, 2, 3]) == ["<PAD>", "<SOT>", "<EOT>", "<S_1>"]
        assert vocab.num_timestamps == 1501
        assert len(vocab) == 3 + 4 + 1501 + len(vocab.charset)
        assert vocab.is_timestamp(vocab.timestamp_token(0.0))
        assert vocab.is_text(vocab.encode_text("a")[0])

    def test_round_trip(self, tmp_path):
        v = Vocabulary(max_speakers=3, max_s=5.12)
        v.save(tmp_path / "v.json")
        back = Vocabulary.load(tmp_path / "v.json")
        assert back.token_to_id == v.token_to_id

    def test_unknown_character(self, vocab):
        with pytest.raises(LabelError, match="not in vocabulary"):
            vocab.encode_text("ab1")

    def test_speaker_range(self, vocab):
        with pytest.raises(LabelError):
            vocab.speaker_token(5)


class TestBuildLabel:
    def test_spk_ts_2_case2(self, vocab, case2):
        label = build_label(case2, Scheme.SPK_TS_2, vocab)
        expected = [vocab.sot_id, *toks(vocab, 1, 0.0, 8.0, "hello there bye now", 2, 2.0, 6.0, "good day"),
                    vocab.eot_id]
        assert label.tokens == expected
        words = vocab.decode(label.tokens)
        assert words[2:4] == ["<T_0>", "<T_400>"]
        i = words.index("<S_2>")
        assert words[i + 1:i + 3] == ["<T_100>", "<T_300>"]

    def test_spk_ts_1_layout(self, vocab, case2):
        label = build_label(case2, "SPK_TS_1", vocab)
        assert label.tokens == [vocab.sot_id, *toks(vocab, 1, 0.0, "hello there bye now", 8.0,
                                                     2, 2.0, "good day", 6.0), vocab.eot_id]

    def test_spk_layout(self, vocab, case2):
        label = build_label(case2, "SPK", vocab)
        assert label.tokens == [vocab.sot_id, *toks(vocab, 1, "hello there bye now", 2, "good day"), vocab.eot_id]

    def test_fifo_order(self, vocab):
        a = alpha_utterance("a", "zed", 1.0, ["one"])
        b = alpha_utterance("b", "amy", 1.0, ["two"])
        label = build_label(make_case1(a, b, 0.5), "SPK", vocab)
        assert vocab.decode(label.tokens)[1:5] == ["<S_1>", "o", "n", "e"]

    def test_original_single_block(self, vocab):
        ex = make_original(alpha_utterance("a", "A", 1.0, ["hi"]))
        assert build_label(ex, "SPK_TS_2", vocab).tokens == [vocab.sot_id, *toks(vocab, 1, 0.0, 1.0, "hi"),
                                                            vocab.eot_id]

    def test_timestamps_need_alignments(self, vocab):
        utt = alpha_utterance("a", "A", 1.0, ["hi"])
        utt.word_alignments = []
        ex = make_original(utt)
        build_label(ex, "SPK", vocab)
        with pytest.raises(LabelError, match="alignments"):
            build_label(ex, "SPK_TS_1", vocab)

    def test_too_many_speakers(self, case2):
        with pytest.raises(LabelError, match="exceed"):
            build_label(case2, "SPK", Vocabulary(max_speakers=1))

    def test_time_beyond_range(self, case2):
        with pytest.raises(LabelError):
            build_label(case2, "SPK_TS_2", Vocabulary(max_s=5.12))


class TestParse:
    @pytest.mark.parametrize("scheme", list(Scheme))
    def test_round_trip(self, vocab, case2, scheme):
        label = build_label(case2, scheme, vocab)
        blocks, bad = parse_hypothesis(label.tokens, scheme, vocab)
        assert bad == 0
        assert [b.speaker_index for b in blocks] == [1, 2]
        assert [b.words for b in blocks] == [["hello", "there", "bye", "now"], ["good", "day"]]
        if scheme.timestamped:
            assert [(b.start_s, b.end_s) for b in blocks] == [(0.0, 8.0), (2.0, 6.0)]
        else:
            assert not any(b.has_times for b in blocks)

    def test_text_before_speaker(self, vocab):
        blocks, bad = parse_hypothesis(toks(vocab, "hi", 1, "yo"), "SPK", vocab)
        assert bad == 0
        assert [(b.speaker_index, b.words) for b in blocks] == [(None, ["hi"]), (1, ["yo"])]

    def test_missing_end_time(self, vocab):
        blocks, bad = parse_hypothesis(toks(vocab, 1, 0.5, "hi", 2, 1.0, "yo", 2.0), "SPK_TS_1", vocab)
        assert bad == 1
        assert not blocks[0].has_times and blocks[0].words == ["hi"]
        assert (blocks[1].start_s, blocks[1].end_s) == (1.0, 2.0)

    def test_timestamp_in_plain_scheme(self, vocab):
        blocks, bad = parse_hypothesis(toks(vocab, 1, 0.5, "hi"), "SPK", vocab)
        assert bad == 1 and blocks[0].words == ["hi"]

    def test_reversed_times(self, vocab):
        blocks, bad = parse_hypothesis(toks(vocab, 1, 2.0, 1.0, "hi"), "SPK_TS_2", vocab)
        assert bad == 1 and not blocks[0].has_times

    def test_stops_at_eot_and_skips_control(self, vocab):
        tokens = [vocab.sot_id, *toks(vocab, 1, "a"), vocab.pad_id, *toks(vocab, "b"), vocab.eot_id, *toks(vocab, 2, "c")]
        blocks, bad = parse_hypothesis(tokens, "SPK", vocab)
        assert bad == 1
        assert [b.words for b in blocks] == [["ab"]]

    def test_empty(self, vocab):
        assert parse_hypothesis([], "SPK_TS_2", vocab) == ([], 0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 1600), max_size=60), st.sampled_from(list(Scheme)))
    def test_never_raises(self, tokens, scheme):
        v = Vocabulary()
        tokens = [t % len(v) for t in tokens]
        blocks, bad = parse_hypothesis(tokens, scheme, v)
        assert bad >= 0
        for b in blocks:
            assert not b.has_times or b.start_s <= b.end_s
