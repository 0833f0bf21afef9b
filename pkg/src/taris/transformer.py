"""Single-head pre-norm Transformer encoder and decoder driven by additive masks.

Parameters live in a flat ``{name: DiffArray}`` dict so that every connectivity
variant is purely a choice of bias arrays.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray

VOCAB = 28
BOS = 28
LN_EPS = 1e-6


@dataclass(frozen=True)
class StackConfig:
    layers: int = 2
    hidden: int = 64
    d_ff: int = 64
    heads: int = 1
    dropout: float = 0.1
    vocab: int = VOCAB

    def __post_init__(self):
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.vocab != VOCAB:
            raise ValueError(f"vocabulary size is fixed at {VOCAB}")
        if self.layers < 1 or self.hidden < 1 or self.d_ff < 1:
            raise ValueError("layers, hidden and d_ff must be positive")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _param(value, name) -> DiffArray:
    return DiffArray(value, requires_grad=True, name=name)


def _init_attention(rng, h: int, prefix: str) -> dict[str, DiffArray]:
    return {f"{prefix}.{k}": _param(glorot(rng, h, h), f"{prefix}.{k}") for k in ("wq", "wk", "wv", "wo")}


def _init_norm(h: int, prefix: str) -> dict[str, DiffArray]:
    return {f"{prefix}.gain": _param(np.ones(h), f"{prefix}.gain"),
            f"{prefix}.shift": _param(np.zeros(h), f"{prefix}.shift")}


def _init_ffn(rng, h: int, d_ff: int, prefix: str) -> dict[str, DiffArray]:
    return {f"{prefix}.w1": _param(glorot(rng, h, d_ff), f"{prefix}.w1"),
            f"{prefix}.b1": _param(np.zeros(d_ff), f"{prefix}.b1"),
            f"{prefix}.w2": _param(glorot(rng, d_ff, h), f"{prefix}.w2"),
            f"{prefix}.b2": _param(np.zeros(h), f"{prefix}.b2")}


def init_encoder(rng: np.random.Generator, cfg: StackConfig, d_in: int, prefix: str) -> dict[str, DiffArray]:
    h = cfg.hidden
    params = {f"{prefix}.w_in": _param(glorot(rng, d_in, h), f"{prefix}.w_in"),
              f"{prefix}.b_in": _param(np.zeros(h), f"{prefix}.b_in")}
    for layer in range(cfg.layers):
        p = f"{prefix}.{layer}"
        params.update(_init_norm(h, f"{p}.ln1"))
        params.update(_init_attention(rng, h, f"{p}.self"))
        params.update(_init_norm(h, f"{p}.ln2"))
        params.update(_init_ffn(rng, h, cfg.d_ff, f"{p}.ffn"))
    params.update(_init_norm(h, f"{prefix}.ln_out"))
    return params


def init_decoder(rng: np.random.Generator, cfg: StackConfig, prefix: str) -> dict[str, DiffArray]:
    h = cfg.hidden
    params = {f"{prefix}.embed": _param(glorot(rng, cfg.vocab + 1, h), f"{prefix}.embed")}
    for layer in range(cfg.layers):
        p = f"{prefix}.{layer}"
        params.update(_init_norm(h, f"{p}.ln1"))
        params.update(_init_attention(rng, h, f"{p}.self"))
        params.update(_init_norm(h, f"{p}.ln2"))
        params.update(_init_attention(rng, h, f"{p}.cross"))
        params.update(_init_norm(h, f"{p}.ln3"))
        params.update(_init_ffn(rng, h, cfg.d_ff, f"{p}.ffn"))
    params.update(_init_norm(h, f"{prefix}.ln_out"))
    params[f"{prefix}.w_v"] = _param(glorot(rng, h, cfg.vocab), f"{prefix}.w_v")
    params[f"{prefix}.b_v"] = _param(np.zeros(cfg.vocab), f"{prefix}.b_v")
    return params


def positional_encoding(length: int, h: int) -> DiffArray:
    """Sinusoidal table; even columns are sines, odd columns cosines."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return DiffArray(_pe_table(length, h))


@functools.lru_cache(maxsize=64)
def _pe_table(length: int, h: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = 1.0 / np.power(10000.0, (np.arange(h) // 2 * 2) / h)
    angle = pos * rate[None, :]
    table = np.where(np.arange(h) % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


def attention(queries, keys, values, bias=None, *, dropout: float = 0.0,
              rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    """Scaled dot-product attention with an additive pre-softmax bias."""
    h = queries.shape[-1]
    scores = dc.matmul(queries, dc.swapaxes(keys)) * (1.0 / math.sqrt(h))
    weights = dc.softmax_with_bias(scores, bias)
    weights = dc.dropout(weights, dropout, rng, training)
    return dc.matmul(weights, values)


def _norm(x, params, prefix):
    return dc.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.shift"], LN_EPS)


def _attend(q_in, kv_in, bias, params, prefix, cfg, training, rng):
    q = q_in @ params[f"{prefix}.wq"]
    k = kv_in @ params[f"{prefix}.wk"]
    v = kv_in @ params[f"{prefix}.wv"]
    ctx = attention(q, k, v, bias, dropout=cfg.dropout, rng=rng, training=training)
    return ctx @ params[f"{prefix}.wo"]


def _ffn(x, params, prefix, cfg, training, rng):
    hidden = dc.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    hidden = dc.dropout(hidden, cfg.dropout, rng, training)
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def encoder_input(frames, params, prefix: str, offset: int = 0) -> DiffArray:
    """Input projection plus positional encoding for frames starting at ``offset``."""
    n = frames.shape[-2]
    h = params[f"{prefix}.b_in"].shape[0]
    pe = positional_encoding(offset + n, h).value[offset:]
    return frames @ params[f"{prefix}.w_in"] + params[f"{prefix}.b_in"] + pe


def encoder_layer(x_query, x_keys, bias, params, prefix: str, layer: int, cfg: StackConfig,
                  training: bool = False, rng=None) -> DiffArray:
    """One encoder block for the query rows ``x_query`` attending over ``x_keys``.

    Everything except attention is position-wise, so the queries may be any subset
    of the key positions; offline encoding passes the same array twice.
    """
    p = f"{prefix}.{layer}"
    yq = _norm(x_query, params, f"{p}.ln1")
    yk = yq if x_keys is x_query else _norm(x_keys, params, f"{p}.ln1")
    x = x_query + _attend(yq, yk, bias, params, f"{p}.self", cfg, training, rng)
    return x + _ffn(_norm(x, params, f"{p}.ln2"), params, f"{p}.ffn", cfg, training, rng)


def encoder_output(x, params, prefix: str) -> DiffArray:
    return _norm(x, params, f"{prefix}.ln_out")


def encode(frames, mask, params, cfg: StackConfig, training: bool = False, rng=None,
           prefix: str = "enc", return_layers: bool = False):
    """Masked self-attention encoder; the same mask is used in every layer.

    ``frames`` is [N, d_in] or [B, N, d_in]; ``mask`` is a bias broadcastable to
    [B, N, N].  With ``return_layers`` the per-layer outputs (before the final
    norm) are returned as well.
    """
    frames = frames if isinstance(frames, DiffArray) else DiffArray(frames)
    if mask is not None and np.shape(mask)[-1] != frames.shape[-2]:
        raise ValueError("encoder mask does not match the frame count")
    x = encoder_input(frames, params, prefix)
    layers = [x]
    for layer in range(cfg.layers):
        x = encoder_layer(x, x, mask, params, prefix, layer, cfg, training, rng)
        layers.append(x)
    out = encoder_output(x, params, prefix)
    return (out, layers) if return_layers else out


def decode(tokens, memory, self_mask, cross_mask, params, cfg: StackConfig,
           training: bool = False, rng=None, prefix: str = "dec") -> DiffArray:
    """Teacher-forced decoder returning vocabulary logits, [L, vocab] or [B, L, vocab].

    ``tokens`` are the decoder inputs (BOS followed by the shifted targets).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    h = cfg.hidden
    x = dc.take_rows(params[f"{prefix}.embed"], tokens) + positional_encoding(tokens.shape[-1], h).value
    for layer in range(cfg.layers):
        p = f"{prefix}.{layer}"
        y = _norm(x, params, f"{p}.ln1")
        x = x + _attend(y, y, self_mask, params, f"{p}.self", cfg, training, rng)
        y = _norm(x, params, f"{p}.ln2")
        x = x + _attend(y, memory, cross_mask, params, f"{p}.cross", cfg, training, rng)
        x = x + _ffn(_norm(x, params, f"{p}.ln3"), params, f"{p}.ffn", cfg, training, rng)
    x = _norm(x, params, f"{prefix}.ln_out")
    return x @ params[f"{prefix}.w_v"] + params[f"{prefix}.b_v"]
