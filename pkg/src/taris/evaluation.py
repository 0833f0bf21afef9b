"""Scoring a model on a corpus split in offline or streaming mode."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .model import TarisModel, greedy_decode_offline
from .streaming import LatencyReport, stream_utterance
from .synthdata import SyntheticSample, mix_noise, space_count

EVAL_MODES = ("offline", "stream-final", "stream-eager")


@dataclass
class SentenceResult:
    index: int
    hypothesis: str
    reference: str
    alpha: np.ndarray
    spaces: int
    edits: int
    truncated: bool = False
    latency: LatencyReport | None = None

    @property
    def gate_sum(self) -> float:
        return float(np.sum(self.alpha))


@dataclass
class EvalReport:
    mode: str
    cer: float
    word_mae: float
    word_mse: float
    sentences: list[SentenceResult]
    histogram: metrics.SegmentHistogram
    latency: LatencyReport | None = None
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"mode": self.mode, "sentences": len(self.sentences), "cer": self.cer,
               "word_mae": self.word_mae, "word_mse": self.word_mse,
               "truncated": sum(s.truncated for s in self.sentences),
               **self.histogram.summary(), **self.extras}
        if self.latency is not None:
            out["latency"] = self.latency.summary()
        return out

    def sentence_rows(self) -> list[dict]:
        return [{"index": s.index, "reference": s.reference, "hypothesis": s.hypothesis,
                 "edits": s.edits, "spaces": s.spaces, "gate_sum": round(s.gate_sum, 6),
                 "truncated": int(s.truncated)} for s in self.sentences]


def _score(i: int, model: TarisModel, sample: SyntheticSample, mode: str) -> SentenceResult:
    video = sample.video if model.config.modality == "av" else None
    ref = sample.text
    if mode == "offline":
        res = greedy_decode_offline(model, sample.audio, video)
        hyp, alpha, truncated, latency = res.text, res.gate.alpha, res.truncated, None
    else:
        state = stream_utterance(model, sample.audio, video, mode.split("-")[1])
        hyp, alpha, truncated, latency = state.transcript, np.array(state.alpha), state.truncated, state.report()
    return SentenceResult(i, hyp, ref, alpha, space_count(sample), metrics.levenshtein(hyp, ref),
                          truncated, latency)


def noisy_split(samples, snr_db: float, seed: int) -> list[SyntheticSample]:
    if math.isinf(snr_db) and snr_db > 0:
        return list(samples)
    return [mix_noise(s, snr_db, [seed, 99, i]) for i, s in enumerate(samples)]


def evaluate(model: TarisModel, samples, mode: str = "offline", *, snr_db: float = math.inf,
             seed: int = 0, workers: int = 1) -> EvalReport:
    """Decode every sample and aggregate CER, word-count errors, histograms and latency.

    ``snr_db`` mixes evaluation noise (seeded by ``seed`` and sample index) on top of
    the stored audio.  Results are reduced in sample order whatever ``workers`` is.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    data = noisy_split(samples, snr_db, seed)
    if not data:
        raise ValueError("no samples to evaluate")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda p: _score(p[0], model, p[1], mode), enumerate(data)))
    else:
        results = [_score(i, model, s, mode) for i, s in enumerate(data)]
    total_ref = sum(len(r.reference) for r in results)
    if total_ref == 0:
        raise ValueError("character error rate needs a non-empty reference")
    cer = sum(r.edits for r in results) / total_ref
    mae, mse = metrics.word_count_errors([r.gate_sum for r in results], [r.spaces for r in results])
    hist = metrics.segment_histogram([r.alpha for r in results], model.config.frame_ms,
                                     np.concatenate([s.word_lengths for s in data]))
    latency = None
    if mode != "offline":
        latency = LatencyReport(mode.split("-")[1], model.config.frame_ms)
        for r in results:
            latency.delays.extend(r.latency.delays)
            latency.revisions.extend(r.latency.revisions)
    return EvalReport(mode, cer, mae, mse, results, hist, latency)
