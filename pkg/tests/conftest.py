import numpy as np
import pytest

from spkmask.signal import AudioClip
from spkmask.simulate import Utterance, gen_toy_corpus

SR = 16000


def tone(duration_s, freq=220.0, amp=0.3, sr=SR):
    t = np.arange(int(round(duration_s * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def tone_utterance(uid, speaker, duration_s, freq=220.0, word_dur_s=0.5, amp=0.3):
    """A continuous tone with words tiling it at ``word_dur_s``."""
    clip = tone(duration_s, freq, amp)
    n = int(round(duration_s / word_dur_s))
    words = [f"w{i}" for i in range(n)]
    aligns = [(w, i * word_dur_s, min((i + 1) * word_dur_s, duration_s)) for i, w in enumerate(words)]
    return Utterance(uid, clip, speaker, words, aligns)


def alpha_utterance(uid, speaker, duration_s, words, freq=220.0):
    """Tone with alphabetic words evenly tiling the clip (usable by the character vocabulary)."""
    clip = tone(duration_s, freq)
    step = duration_s / len(words)
    aligns = [(w, i * step, (i + 1) * step) for i, w in enumerate(words)]
    return Utterance(uid, clip, speaker, list(words), aligns)


@pytest.fixture(scope="session")
def toy_corpus():
    return gen_toy_corpus(num_speakers=3, utts_per_speaker=6, seed=0)
