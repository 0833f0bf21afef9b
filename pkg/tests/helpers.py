"""Small model and data factories shared by the tests."""
from __future__ import annotations

import math

import numpy as np

from taris.config import load_config
from taris.model import TarisModel


def small_config(**overrides):
    base = dict(layers=2, hidden=16, dff=16, d_audio=8, d_video=8, dropout=0.0)
    base.update(overrides)
    return load_config("desk", **base)


def small_model(seed=0, gate_bias=None, **overrides):
    model = TarisModel.init(small_config(**overrides), seed)
    if gate_bias is not None:
        model.params["gate.b"].value = np.array([float(gate_bias)])
    return model


def random_inputs(rng, n, d_a=8, d_v=8):
    return rng.standard_normal((n, d_a)), rng.standard_normal((math.ceil(n / 2), d_v))


# criterion number -> one-line verdict, printed in the pytest terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line
