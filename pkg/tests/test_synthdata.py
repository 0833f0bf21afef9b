import math

import numpy as np
import pytest

from taris import synthdata as sd
from taris.segmentation import SPACE


@pytest.fixture(scope="module")
def lexicon():
    return sd.build_lexicon(3, 20, 16, 16)


def test_lexicon_deterministic_and_unique(lexicon):
    again = sd.build_lexicon(3, 20, 16, 16)
    assert again.words == lexicon.words
    assert all(np.array_equal(a, b) for a, b in zip(again.audio, lexicon.audio))
    assert len(set(lexicon.words)) == 20
    assert all(3 <= len(w) <= 8 and " " not in w for w in lexicon.words)


def test_lexicon_template_variance():
    lex = sd.build_lexicon(4, 20, 16, 16, length_range=(8, 12))
    for a in lex.audio:
        assert a.size >= 100
        assert 0.5 <= a.var() <= 1.5


def test_lexicon_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sd.build_lexicon(0, 1)
    with pytest.raises(ValueError):
        sd.build_lexicon(0, 5, length_range=(1, 4))


def test_sentence_structure(lexicon):
    for i in range(30):
        s = sd.synthesize_sentence(lexicon, [0, i], (1, 8), silence_rate=0.3 if i % 2 else 0.0)
        n = len(s.audio)
        assert s.video.shape == (math.ceil(n / 2), 16)
        spans = s.boundaries
        assert spans[0, 0] == 0 and spans[-1, 1] == n
        assert np.all(spans[1:, 0] == spans[:-1, 1])
        words = s.text.split(" ")
        assert len(words) == len(spans)
        assert sd.space_count(s) == len(words) - 1
        assert all(w in lexicon.words for w in words)


def test_one_word_sentence_has_no_space(lexicon):
    s = sd.synthesize_sentence(lexicon, 7, (1, 1))
    assert SPACE not in s.transcript.tolist()


def test_mix_noise(lexicon):
    s = sd.synthesize_sentence(lexicon, 9, (8, 8))
    assert sd.mix_noise(s, math.inf, 0) is s
    big = sd.SyntheticSample(np.random.default_rng(0).standard_normal((1000, 16)), s.video,
                             s.transcript, s.boundaries)
    noisy = sd.mix_noise(big, 0.0, 1)
    noise = noisy.audio - big.audio
    snr = 10 * math.log10(np.mean(big.audio ** 2) / np.mean(noise ** 2))
    assert abs(snr) < 0.5
    assert np.array_equal(noisy.video, big.video)
    assert np.array_equal(sd.mix_noise(big, 0.0, 1).audio, noisy.audio)
    with pytest.raises(ValueError):
        sd.mix_noise(s, math.nan, 0)


def test_corpus_round_trip_and_determinism(tmp_path, lexicon):
    m1 = sd.make_corpus(tmp_path / "a", lexicon, 12, 4, seed=5)
    sd.make_corpus(tmp_path / "b", lexicon, 12, 4, seed=5)
    for split in ("train.bin", "test.bin"):
        assert (tmp_path / "a" / split).read_bytes() == (tmp_path / "b" / split).read_bytes()
    train = sd.read_corpus(tmp_path / "a" / "train.bin")
    assert len(train) == 12 and len(sd.read_corpus(tmp_path / "a" / "test.bin")) == 4
    original = sd.synthesize_sentence(lexicon, [5, 1, 0])
    assert np.array_equal(train[0].audio, original.audio.astype(np.float32))
    assert train[0].text == original.text
    assert np.array_equal(train[0].boundaries, original.boundaries)
    assert sd.load_manifest(tmp_path / "a") == m1


def test_corpus_counts_full_size(tmp_path, lexicon):
    sd.make_corpus(tmp_path, lexicon, 2000, 200, seed=1)
    assert sum(1 for _ in sd.iter_corpus(tmp_path / "train.bin")) == 2000
    assert sum(1 for _ in sd.iter_corpus(tmp_path / "test.bin")) == 200


def test_uninformative_video_is_uncorrelated(lexicon):
    # same seed: the informative stream is the word-dependent signal the other one should lack
    signal, blank = [], []
    for i in range(100):
        signal.append(sd.synthesize_sentence(lexicon, [1, i], informativeness=1.0).video)
        blank.append(sd.synthesize_sentence(lexicon, [1, i], informativeness=0.0).video)
    signal, blank = np.vstack(signal), np.vstack(blank)
    r = [abs(np.corrcoef(signal[:, d], blank[:, d])[0, 1]) for d in range(signal.shape[1])]
    assert np.mean(r) < 0.05
    half = np.vstack([sd.synthesize_sentence(lexicon, [1, i], informativeness=0.5).video for i in range(100)])
    assert np.mean([abs(np.corrcoef(signal[:, d], half[:, d])[0, 1]) for d in range(16)]) > 0.5


def test_corpus_errors(tmp_path, lexicon):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC")
    with pytest.raises(sd.CorpusError, match="bad magic"):
        sd.read_corpus(bad)
    sd.write_corpus(tmp_path / "ok.bin", [sd.synthesize_sentence(lexicon, 1)])
    data = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-3])
    with pytest.raises(sd.CorpusError, match="truncated"):
        sd.read_corpus(tmp_path / "cut.bin")
    with pytest.raises(sd.CorpusError):
        sd.read_corpus(tmp_path / "missing.bin")
    with pytest.raises(sd.CorpusError):
        sd.load_manifest(tmp_path)
    with pytest.raises(ValueError):
        sd.make_corpus(tmp_path / "x", lexicon, 0, 1)
