"""Small reverse-mode automatic differentiation engine over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with Tape()``)
whenever one of their inputs requires a gradient.  Outside a tape every op is a
plain numpy computation, which is what inference and finite-difference checks use.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

NEG = -1e9
"""Additive bias for disallowed attention positions."""


class NumericalError(ArithmeticError):
    """A primitive produced NaN or Inf, or was asked to normalise an empty row."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class DiffArray:
    """Dense float64 array that may participate in the active gradient tape."""

    __slots__ = ("value", "requires_grad", "node", "_tape", "name")

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"DiffArray{tag}(shape={self.shape}, node={self.node})"

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise TypeError("division by a DiffArray is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Record:
    out: int
    inputs: tuple[int | None, ...]
    backward: object


@dataclass
class Tape:
    """Ordered record of primitive applications since the tape was entered."""

    records: list[_Record] = field(default_factory=list)
    n_nodes: int = 0
    leaves: dict[int, DiffArray] = field(default_factory=dict)
    _previous: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous

    def _new_node(self) -> int:
        self.n_nodes += 1
        return self.n_nodes - 1

    def _node_of(self, x: DiffArray) -> int | None:
        if x._tape is self and x.node is not None:
            return x.node
        if x.requires_grad:
            x.node = self._new_node()
            x._tape = self
            self.leaves[x.node] = x
            return x.node
        return None


def _as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"non-finite value produced by {op}")


def _apply(op: str, value: np.ndarray, inputs: tuple[DiffArray, ...], backward) -> DiffArray:
    """Wrap an op result, recording it on the active tape when needed."""
    _check_finite(value, op)
    out = DiffArray(value)
    tape = _active_tape()
    if tape is None:
        return out
    nodes = tuple(tape._node_of(x) for x in inputs)
    if all(n is None for n in nodes):
        return out
    out.node = tape._new_node()
    out._tape = tape
    tape.records.append(_Record(out.node, nodes, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    sa, sb = a.shape, b.shape
    return _apply("add", a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    sa, sb = a.shape, b.shape
    return _apply("sub", a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    av, bv = a.value, b.value
    return _apply("mul", av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x) -> DiffArray:
    x = _as_diff(x)
    xv = x.value
    return _apply("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))


def log(x) -> DiffArray:
    x = _as_diff(x)
    xv = x.value
    if (xv <= 0).any():
        raise NumericalError("log of a non-positive value")
    return _apply("log", np.log(xv), (x,), lambda g: (g / xv,))


def relu(x) -> DiffArray:
    x = _as_diff(x)
    on = x.value > 0
    return _apply("relu", np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> DiffArray:
    """Elementwise logistic ``1 / (1 + exp(-x))``, computed without overflow."""
    x = _as_diff(x)
    xv = x.value
    e = np.exp(-np.abs(xv))
    y = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> DiffArray:
    x = _as_diff(x)
    y = np.tanh(x.value)
    return _apply("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# shape and reduction primitives


def matmul(a, b) -> DiffArray:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = _as_diff(a), _as_diff(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _apply("matmul", av @ bv, (a, b), backward)


def sum(x, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    x = _as_diff(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None) -> DiffArray:
    x = _as_diff(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def reshape(x, shape) -> DiffArray:
    x = _as_diff(x)
    old = x.shape
    return _apply("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1: int = -1, a2: int = -2) -> DiffArray:
    x = _as_diff(x)
    return _apply("swapaxes", np.swapaxes(x.value, a1, a2), (x,),
                  lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, index) -> DiffArray:
    x = _as_diff(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _apply("getitem", x.value[index], (x,), backward)


def concat(xs, axis: int = -1) -> DiffArray:
    xs = [_as_diff(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _apply("concat", np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(table, indices) -> DiffArray:
    """Embedding lookup: ``table[indices]`` with scatter-add gradient."""
    table = _as_diff(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _apply("take_rows", table.value[idx], (table,), backward)


# ---------------------------------------------------------------------------
# neural-network primitives


def softmax_with_bias(logits, bias=None) -> DiffArray:
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` is a constant array of 0 (allowed) and ``NEG`` (disallowed) entries,
    broadcast against the logits.  A slice with no allowed entry is an error.
    """
    logits = _as_diff(logits)
    z = logits.value
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if not (bias > NEG / 2).any(axis=-1).all():
            raise NumericalError("empty attention row")
        z = z + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax_with_bias", y, (logits,), backward)


def layer_norm(x, gain, shift, eps: float = 1e-6) -> DiffArray:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, shift = _as_diff(x), _as_diff(gain), _as_diff(shift)
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = xv.shape[-1]

    def backward(g):
        gh = g * gv
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, shift.shape)

    return _apply("layer_norm", xhat * gv + shift.value, (x, gain, shift), backward)


@dataclass
class ClampCounter:
    count: int = 0


clamp_counter = ClampCounter()
"""Number of target probabilities clamped at 1e-12 by :func:`cross_entropy`."""


def cross_entropy(probabilities, targets, weights=None) -> DiffArray:
    """Weighted negative log-likelihood of integer ``targets`` under ``probabilities``.

    ``targets`` may be integer class indices (shape ``probabilities.shape[:-1]``) or a
    one-hot array.  Without ``weights`` the result is the mean over all target rows.
    """
    probabilities = _as_diff(probabilities)
    p = probabilities.value
    t = np.asarray(targets)
    if t.shape == p.shape:
        t = t.argmax(axis=-1)
    t = t.astype(np.int64)
    if weights is None:
        weights = np.full(t.shape, 1.0 / max(t.size, 1))
    weights = np.asarray(weights, dtype=np.float64)
    picked = np.take_along_axis(p, t[..., None], axis=-1)[..., 0]
    tiny = picked < 1e-12
    if tiny.any():
        clamp_counter.count += int(tiny.sum())
        picked = np.maximum(picked, 1e-12)
    loss = -(weights * np.log(picked)).sum()

    def backward(g):
        full = np.zeros_like(p)
        gp = np.where(tiny, 0.0, -g * weights / picked)
        np.put_along_axis(full, t[..., None], gp[..., None], axis=-1)
        return (full,)

    return _apply("cross_entropy", np.asarray(loss), (probabilities,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> DiffArray:
    """Inverted dropout with an explicit Bernoulli mask; identity outside training."""
    if not training or rate <= 0.0:
        return _as_diff(x)
    keep = rng.random(_as_diff(x).shape) >= rate
    return mul(x, keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# gradients and optimisation


def backward(loss: DiffArray, tape: Tape) -> dict[int, DiffArray]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a map from node id to gradient for every node reachable from the loss.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss.node is None:
        raise ValueError("loss is not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * tape.n_nodes
    grads[loss.node] = np.ones_like(loss.value)
    for rec in reversed(tape.records):
        g = grads[rec.out]
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.backward(g)):
            if node is None:
                continue
            grads[node] = gi if grads[node] is None else grads[node] + gi
    return {i: DiffArray(g) for i, g in enumerate(grads) if g is not None}


def grad_of(grads: dict[int, DiffArray], x: DiffArray) -> np.ndarray:
    """Gradient of ``x`` from a :func:`backward` map (zeros when unreachable)."""
    if x.node is None or x.node not in grads:
        return np.zeros_like(x.value)
    return grads[x.node].value


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.value) for p in params],
                   [np.zeros_like(p.value) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; parameter values are replaced, not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_m, new_v = [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.value.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m.append(m)
        new_v.append(v)
    return AdamState(new_m, new_v, t)
