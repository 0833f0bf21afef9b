import numpy as np
import pytest

from taris import synthdata as sd
from taris.evaluation import evaluate, noisy_split

from helpers import small_model


@pytest.fixture(scope="module")
def samples():
    lex = sd.build_lexicon(4, 8, 8, 8)
    return [sd.synthesize_sentence(lex, [4, i], (1, 5)) for i in range(12)]


def test_offline_and_stream_final_agree(samples):
    model = small_model(seed=3, e_la=1, gate_bias=-1.5)
    offline = evaluate(model, samples, "offline")
    final = evaluate(model, samples, "stream-final", workers=3)
    assert [s.hypothesis for s in offline.sentences] == [s.hypothesis for s in final.sentences]
    assert offline.cer == final.cer and offline.latency is None
    assert final.latency is not None and final.summary()["mode"] == "stream-final"


def test_zero_gate_word_count_error(samples):
    model = small_model(seed=1)
    model.params["gate.w"].value[:] = 0.0
    report = evaluate(model, samples[:6])
    n_half = np.array([len(s.audio) / 2 for s in samples[:6]])
    spaces = np.array([sd.space_count(s) for s in samples[:6]])
    assert np.all(n_half >= spaces)
    assert report.word_mae == pytest.approx(abs(n_half.mean() - spaces.mean()))


def test_reference_hypothesis_gives_zero_cer(samples, monkeypatch):
    import taris.evaluation as ev
    from taris.model import DecodeResult

    texts = iter(s.text for s in samples)
    monkeypatch.setattr(ev, "greedy_decode_offline",
                        lambda model, audio, video: _as_result(DecodeResult, next(texts), model, audio))
    assert evaluate(small_model(), samples).cer == 0.0


def _as_result(cls, text, model, audio):
    from taris import segmentation as seg
    from taris.model import greedy_decode_offline
    gate = greedy_decode_offline(model, audio).gate
    return cls(seg.text_to_ids(text), False, gate)


def test_report_rows_and_errors(samples):
    report = evaluate(small_model(), samples[:3])
    rows = report.sentence_rows()
    assert [r["index"] for r in rows] == [0, 1, 2]
    assert {"hypothesis", "reference", "edits"} <= set(rows[0])
    with pytest.raises(ValueError):
        evaluate(small_model(), samples, "beam")
    with pytest.raises(ValueError):
        evaluate(small_model(), [])


def test_noisy_split_is_seeded(samples):
    a = noisy_split(samples[:2], 0.0, 7)
    b = noisy_split(samples[:2], 0.0, 7)
    assert np.array_equal(a[1].audio, b[1].audio)
    assert not np.array_equal(a[1].audio, samples[1].audio)
    assert noisy_split(samples, float("inf"), 0)[0] is samples[0]
