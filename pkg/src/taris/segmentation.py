"""Mask and index arithmetic: connectivity windows, word and segment indices,
the segment validity mask, and audio/video window alignment.

Masks are additive biases: 0 where attention is allowed and ``NEG`` elsewhere.
Unbounded look-back/look-ahead is expressed with ``math.inf``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import NEG

log = logging.getLogger(__name__)

INF = math.inf
ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
SPACE = 26
APOSTROPHE = 27


def text_to_ids(text: str) -> list[int]:
    try:
        return [ALPHABET.index(c) for c in text]
    except ValueError:
        raise ValueError(f"text contains characters outside the alphabet: {text!r}") from None


def ids_to_text(ids) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


def _check_count(name: str, value: float) -> None:
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class ConnectivitySpec:
    """Encoder look-back / look-ahead in frames."""

    look_back: float = INF
    look_ahead: float = INF

    def __post_init__(self):
        _check_count("look_back", self.look_back)
        _check_count("look_ahead", self.look_ahead)


@dataclass(frozen=True)
class SegmentSpec:
    """Decoder look-back / look-ahead in segments."""

    look_back: float = INF
    look_ahead: float = INF

    def __post_init__(self):
        _check_count("look_back", self.look_back)
        _check_count("look_ahead", self.look_ahead)


@dataclass
class GateTrace:
    alpha: np.ndarray
    cumsum: np.ndarray
    segment_ids: np.ndarray

    @classmethod
    def from_alpha(cls, alpha) -> "GateTrace":
        alpha = np.asarray(alpha, dtype=np.float64)
        cs = np.cumsum(alpha)
        return cls(alpha, cs, np.floor(cs).astype(np.int64))


def bias_from_allowed(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, NEG)


def allowed_from_bias(bias: np.ndarray) -> np.ndarray:
    return np.asarray(bias) > NEG / 2


def encoder_window_mask(n: int, spec: ConnectivitySpec) -> np.ndarray:
    """[n, n] bias allowing query i to see key k iff i - look_back <= k <= i + look_ahead."""
    if n < 1:
        raise ValueError("frame count must be >= 1")
    i = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    allowed = (k >= i - spec.look_back) & (k <= i + spec.look_ahead)
    return bias_from_allowed(allowed)


def causal_mask(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError("token count must be >= 1")
    return bias_from_allowed(np.tril(np.ones((length, length), dtype=bool)))


def word_indices(labels) -> np.ndarray:
    """Running count of SPACE tokens, inclusive of the current position."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.cumsum(labels == SPACE).astype(np.int64)


def segment_indices(alpha) -> np.ndarray:
    """Floor of the running sum of gate values, one index per frame."""
    return GateTrace.from_alpha(alpha).segment_ids


def segment_allowed(w, w_hat, spec: SegmentSpec) -> np.ndarray:
    """Boolean [L, N] validity matrix built by tiling word and segment indices."""
    w = np.asarray(w, dtype=np.int64)
    w_hat = np.asarray(w_hat, dtype=np.int64)
    words = np.tile(w[:, None], (1, len(w_hat)))
    segs = np.tile(w_hat[None, :], (len(w), 1))
    return (segs >= words - spec.look_back) & (segs <= words + spec.look_ahead)


def segment_mask(w, w_hat, spec: SegmentSpec, fallback: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Bias for decoder-to-encoder attention plus a flag per grapheme row.

    The flag marks rows whose window holds no frame.  With ``fallback`` those rows
    are opened to every frame, otherwise they are left empty for the caller.
    """
    allowed = segment_allowed(w, w_hat, spec)
    empty = ~allowed.any(axis=1)
    if fallback and empty.any() and allowed.shape[1] > 0:
        log.debug("segment mask: %d grapheme rows without frames, opening them", int(empty.sum()))
        allowed[empty] = True
    return bias_from_allowed(allowed), empty


def av_window(i: int, n: int, m: int, half_width: int, ratio: float | None = None) -> tuple[int, int]:
    """Inclusive video index range for audio frame ``i`` (0-based).

    The aligned video frame is ``floor((i + 1) * m / n) - 1`` clamped to the video
    stream; ``ratio`` replaces ``m / n`` when the stream lengths are not known.
    """
    if not 0 <= i < n:
        raise ValueError(f"audio index {i} outside [0, {n})")
    if m < 1 or half_width < 0:
        raise ValueError("need m >= 1 and half_width >= 0")
    if ratio is None:
        j = (i + 1) * m // n - 1
    else:
        j = math.floor((i + 1) * ratio) - 1
    j = min(max(j, 0), m - 1)
    return max(0, j - half_width), min(m - 1, j + half_width)


def av_mask(n: int, m: int, half_width: int, ratio: float | None = None) -> np.ndarray:
    """[n, m] bias restricting each audio frame to its video window."""
    allowed = np.zeros((n, m), dtype=bool)
    for i in range(n):
        lo, hi = av_window(i, n, m, half_width, ratio)
        allowed[i, lo:hi + 1] = True
    return bias_from_allowed(allowed)


@dataclass
class Crossings:
    frames: np.ndarray
    lengths: np.ndarray


def crossings(alpha) -> Crossings:
    """Frames where the floor of the running gate sum increases, and the gaps between them."""
    ids = segment_indices(alpha)
    prev = np.concatenate([[0], ids[:-1]])
    frames = np.nonzero(ids > prev)[0]
    return Crossings(frames, np.diff(frames))


def mask_rows(bias: np.ndarray) -> list[str]:
    """Render a 2D bias as rows of '1' (allowed) / '0' characters."""
    return ["".join("1" if a else "0" for a in row) for row in allowed_from_bias(bias)]
