import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taris import diffcore as dc
from taris.diffcore import DiffArray, NumericalError, Tape

from oracles import central_difference, relative_error


def grad_check(build, shapes, rng, tol, positive=False):
    """Compare backward() with central differences for a scalar function of arrays."""
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    params = [DiffArray(x, True) for x in xs]
    with Tape() as tape:
        loss = build(*params)
    grads = dc.backward(loss, tape)
    for p in params:
        numeric = central_difference(lambda: float(build(*params).value), p.value)
        assert relative_error(dc.grad_of(grads, p), numeric) < tol


# -- matmul -----------------------------------------------------------------

def test_matmul_identity_and_scalar():
    a = DiffArray([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dc.matmul(a, DiffArray(np.eye(2))).value, a.value)
    assert dc.matmul(DiffArray([[2.0]]), DiffArray([[3.0]])).value.tolist() == [[6.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        dc.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 3))))


def test_matmul_gradient():
    grad_check(lambda a, b: dc.sum(dc.matmul(a, b)), [(3, 4), (4, 2)], np.random.default_rng(0), 1e-6)


# -- softmax ----------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(dc.softmax_with_bias(DiffArray([0.0, 0.0]), np.zeros(2)).value, [0.5, 0.5])
    y = dc.softmax_with_bias(DiffArray([0.0, 0.0]), np.array([0.0, dc.NEG])).value
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-30


def test_softmax_rows_sum_to_one():
    y = dc.softmax_with_bias(DiffArray(np.random.default_rng(1).standard_normal((3, 5))))
    assert np.all(np.abs(y.value.sum(-1) - 1.0) <= 1e-12)


def test_softmax_empty_row_errors():
    with pytest.raises(NumericalError, match="empty attention row"):
        dc.softmax_with_bias(DiffArray(np.zeros((2, 3))), np.array([[0, 0, 0], [dc.NEG] * 3]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_permutation_equivariant(rows, cols, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((rows, cols))
    bias = np.where(rng.random((rows, cols)) < 0.3, dc.NEG, 0.0)
    bias[:, 0] = 0.0
    perm = rng.permutation(cols)
    y = dc.softmax_with_bias(DiffArray(z), bias).value
    yp = dc.softmax_with_bias(DiffArray(z[:, perm]), bias[:, perm]).value
    assert np.allclose(y[:, perm], yp, rtol=0, atol=1e-15)
    assert np.all(np.abs(y.sum(-1) - 1) <= 1e-12)


# -- elementwise ------------------------------------------------------------

def test_sigmoid_values_and_derivative():
    assert dc.sigmoid(DiffArray(0.0)).value == 0.5
    v = dc.sigmoid(DiffArray(100.0)).value
    assert 1 - 1e-12 < v <= 1.0
    x = DiffArray(np.array([0.0]), True)
    with Tape() as tape:
        y = dc.sum(dc.sigmoid(x))
    assert dc.grad_of(dc.backward(y, tape), x)[0] == pytest.approx(0.25, abs=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_an_error():
    with pytest.raises(NumericalError):
        dc.log(DiffArray([-1.0]))
    with pytest.raises(NumericalError):
        dc.mul(DiffArray([np.inf]), DiffArray([0.0]))


# -- layer norm -------------------------------------------------------------

def test_layer_norm_examples():
    h = 6
    out = dc.layer_norm(DiffArray(np.full(h, 3.0)), np.ones(h), np.zeros(h)).value
    assert np.all(out == 0)
    shift = np.arange(h, dtype=float)
    out = dc.layer_norm(DiffArray(np.random.default_rng(2).standard_normal((2, h))), np.zeros(h), shift)
    assert np.array_equal(out.value, np.broadcast_to(shift, (2, h)))
    with pytest.raises(ValueError):
        dc.layer_norm(DiffArray(np.ones(3)), np.ones(3), np.zeros(3), eps=0.0)


def test_layer_norm_gradient():
    grad_check(lambda x, g, b: dc.sum(dc.square(dc.layer_norm(x, g, b)) * np.arange(8.0)),
               [(2, 8), (8,), (8,)], np.random.default_rng(3), 1e-5)


# -- cross entropy ----------------------------------------------------------

def test_cross_entropy_examples():
    p = np.eye(28)[[3, 5]]
    assert dc.cross_entropy(DiffArray(p), np.array([3, 5])).value == 0.0
    uniform = np.full((4, 28), 1 / 28)
    assert dc.cross_entropy(DiffArray(uniform), np.eye(28)[[0, 1, 2, 3]]).value == pytest.approx(math.log(28))
    assert math.log(28) == pytest.approx(3.3322, abs=1e-4)


def test_cross_entropy_clamps_zero_probability():
    before = dc.clamp_counter.count
    p = np.array([[1.0, 0.0]])
    loss = dc.cross_entropy(DiffArray(p), np.array([1]))
    assert loss.value == pytest.approx(-math.log(1e-12))
    assert dc.clamp_counter.count == before + 1


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    targets = rng.integers(0, 5, size=3)
    grad_check(lambda z: dc.cross_entropy(dc.softmax_with_bias(z), targets), [(3, 5)], rng, 1e-5)


# -- backward ---------------------------------------------------------------

def test_backward_sum_and_independent_parameter():
    x = DiffArray(np.arange(6.0).reshape(2, 3), True)
    p = DiffArray(np.ones(2), True)
    with Tape() as tape:
        loss = dc.sum(x)
    grads = dc.backward(loss, tape)
    assert np.array_equal(dc.grad_of(grads, x), np.ones((2, 3)))
    assert np.array_equal(dc.grad_of(grads, p), np.zeros(2))


def test_backward_requires_scalar():
    x = DiffArray(np.ones(3), True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(y, tape)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

    def run():
        x, y = DiffArray(a, True), DiffArray(b, True)
        with Tape() as tape:
            loss = dc.sum(dc.tanh(x @ y) * dc.sigmoid(y))
        g = dc.backward(loss, tape)
        return loss.value, dc.grad_of(g, x), dc.grad_of(g, y)

    first, second = run(), run()
    for u, v in zip(first, second):
        assert np.array_equal(u, v)


# every primitive against finite differences on random shapes
PRIMITIVES = {
    "add": (lambda a, b: dc.sum(dc.add(a, b) * dc.add(a, b)), 2, False, 1e-6),
    "sub": (lambda a, b: dc.sum(dc.square(dc.sub(a, b))), 2, False, 1e-6),
    "mul": (lambda a, b: dc.sum(dc.mul(a, b)), 2, False, 1e-6),
    "square": (lambda a: dc.sum(dc.square(a)), 1, False, 1e-6),
    "log": (lambda a: dc.sum(dc.log(a)), 1, True, 1e-4),
    "relu": (lambda a: dc.sum(dc.relu(a) * a), 1, False, 1e-4),
    "sigmoid": (lambda a: dc.sum(dc.sigmoid(a)), 1, False, 1e-4),
    "tanh": (lambda a: dc.sum(dc.tanh(a)), 1, False, 1e-4),
    "mean": (lambda a: dc.mean(dc.square(a)), 1, False, 1e-6),
    "swapaxes": (lambda a: dc.sum(dc.swapaxes(a) * np.arange(a.shape[0])), 1, False, 1e-6),
    "reshape": (lambda a: dc.sum(dc.square(dc.reshape(a, (-1,)))), 1, False, 1e-6),
    "getitem": (lambda a: dc.sum(dc.square(a[:1])), 1, False, 1e-6),
    "concat": (lambda a, b: dc.sum(dc.square(dc.concat([a, b], axis=0))), 2, False, 1e-6),
    "softmax": (lambda a: dc.sum(dc.softmax_with_bias(a) * np.arange(a.shape[-1])), 1, False, 1e-4),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_random_shapes(name):
    build, arity, positive, tol = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100 // len(PRIMITIVES) + 1):
        shape = tuple(int(s) for s in rng.integers(1, 17, size=2))
        grad_check(build, [shape] * arity, rng, tol, positive)


def test_take_rows_gradient_accumulates():
    table = DiffArray(np.random.default_rng(6).standard_normal((5, 3)), True)
    idx = np.array([[0, 2, 2], [4, 0, 0]])
    with Tape() as tape:
        loss = dc.sum(dc.take_rows(table, idx))
    g = dc.grad_of(dc.backward(loss, tape), table)
    assert g[:, 0].tolist() == [3, 0, 2, 0, 1]


def test_dropout_inverted_and_inactive_at_inference():
    x = DiffArray(np.ones((200, 50)))
    assert dc.dropout(x, 0.1, None, training=False) is x
    y = dc.dropout(x, 0.1, np.random.default_rng(0), training=True).value
    kept = y != 0
    assert np.allclose(y[kept], 1 / 0.9)
    assert abs(kept.mean() - 0.9) < 0.01


# -- adam -------------------------------------------------------------------

def test_adam_examples():
    p = DiffArray(np.array([1.0]), True)
    state = dc.adam_step([p], [np.array([1.0])], dc.AdamState.zeros_like([p]), lr=0.1)
    assert p.value[0] == pytest.approx(0.9, abs=1e-6)
    assert state.t == 1
    q = DiffArray(np.array([1.0, -2.0]), True)
    dc.adam_step([q], [np.zeros(2)], dc.AdamState.zeros_like([q]), lr=0.1)
    assert q.value.tolist() == [1.0, -2.0]
    dc.adam_step([q], [np.ones(2)], dc.AdamState.zeros_like([q]), lr=0.0)
    assert q.value.tolist() == [1.0, -2.0]


def test_adam_shape_mismatch():
    p = DiffArray(np.ones(2), True)
    with pytest.raises(ValueError):
        dc.adam_step([p], [np.ones(3)], dc.AdamState.zeros_like([p]), lr=0.1)
