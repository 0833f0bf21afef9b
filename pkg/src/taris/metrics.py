"""Character error rate, word-count errors and segment-length histograms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import segmentation as seg


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences (strings or id lists)."""
    a, b = list(a), list(b)
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


def cer(hypothesis, reference) -> float:
    if len(reference) == 0:
        raise ValueError("character error rate needs a non-empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


def corpus_cer(hypotheses, references) -> float:
    """Total edit distance over total reference length."""
    edits = sum(levenshtein(h, r) for h, r in zip(hypotheses, references, strict=True))
    total = sum(len(r) for r in references)
    if total == 0:
        raise ValueError("character error rate needs a non-empty reference")
    return edits / total


@dataclass
class Histogram:
    """Counts over unit-frame bins; ``edges_frames`` has one more entry than ``counts``."""

    edges_frames: np.ndarray
    counts: np.ndarray
    frame_ms: float

    @property
    def edges_ms(self) -> np.ndarray:
        return self.edges_frames * self.frame_ms

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mean_frames(self) -> float | None:
        """Mean length in frames, or None for an empty histogram."""
        if self.total == 0:
            return None
        centres = self.edges_frames[:-1]
        return float(np.dot(centres, self.counts) / self.total)

    def rows(self) -> list[dict]:
        return [{"frames": int(lo), "ms_low": float(lo * self.frame_ms),
                 "ms_high": float((lo + 1) * self.frame_ms), "count": int(c)}
                for lo, c in zip(self.edges_frames[:-1], self.counts)]


def integer_histogram(values, frame_ms: float, lo: int | None = None, hi: int | None = None) -> Histogram:
    """Histogram of integer frame counts with one bin per value in [lo, hi]."""
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    values = np.asarray(values, dtype=np.int64)
    if values.size == 0 and (lo is None or hi is None):
        return Histogram(np.zeros(0), np.zeros(0, dtype=np.int64), frame_ms)
    lo = int(values.min()) if lo is None else lo
    hi = int(values.max()) if hi is None else hi
    counts = np.bincount(values - lo, minlength=hi - lo + 1)[:hi - lo + 1] if values.size else \
        np.zeros(hi - lo + 1, dtype=np.int64)
    return Histogram(np.arange(lo, hi + 2, dtype=np.float64), counts.astype(np.int64), frame_ms)


def segment_lengths(alphas) -> np.ndarray:
    """Gaps between consecutive crossings, pooled over sentences."""
    gaps = [seg.crossings(a).lengths for a in alphas]
    return np.concatenate(gaps).astype(np.int64) if gaps else np.zeros(0, dtype=np.int64)


@dataclass
class SegmentHistogram:
    segments: Histogram
    reference: Histogram | None

    def rows(self) -> list[dict]:
        ref = {} if self.reference is None else {r["frames"]: r["count"] for r in self.reference.rows()}
        out = []
        for r in self.segments.rows():
            r = dict(r, reference_count=ref.get(r["frames"], 0))
            out.append(r)
        return out

    def summary(self) -> dict:
        out = {"segment_count": self.segments.total, "segment_mean_frames": self.segments.mean_frames()}
        if self.reference is not None:
            out.update(word_count=self.reference.total, word_mean_frames=self.reference.mean_frames())
        return out


def segment_histogram(alphas, frame_ms: float, word_lengths=None) -> SegmentHistogram:
    """Segment-length histogram from gate sequences, optionally overlaid with
    reference word lengths (in frames) on a shared bin range."""
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    gaps = segment_lengths(alphas)
    ref = None if word_lengths is None else np.asarray(word_lengths, dtype=np.int64).ravel()
    pooled = gaps if ref is None else np.concatenate([gaps, ref])
    if pooled.size == 0:
        empty = integer_histogram(pooled, frame_ms)
        return SegmentHistogram(empty, None if ref is None else empty)
    lo, hi = int(pooled.min()), int(pooled.max())
    return SegmentHistogram(integer_histogram(gaps, frame_ms, lo, hi),
                            None if ref is None else integer_histogram(ref, frame_ms, lo, hi))


def word_count_errors(gate_sums, space_counts) -> tuple[float, float]:
    """Mean absolute and mean squared gap between gate sums and SPACE counts."""
    diff = np.asarray(gate_sums, dtype=np.float64) - np.asarray(space_counts, dtype=np.float64)
    if diff.size == 0:
        raise ValueError("no sentences to score")
    return float(np.mean(np.abs(diff))), float(np.mean(diff ** 2))
