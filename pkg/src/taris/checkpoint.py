"""Binary checkpoints: parameters, optimizer moments and training position.

Layout: ``b"TARISCK1"``, a little-endian u64 header length, a UTF-8 JSON header,
then raw little-endian tensor payloads in header order.  Each tensor records its
own dtype (``f64`` or ``f32``); training checkpoints use ``f64`` so that resuming
continues the exact same arithmetic, exports may use ``f32`` for size.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TarisConfig
from .diffcore import AdamState, DiffArray
from .model import TarisModel

MAGIC = b"TARISCK1"
_DTYPES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name


@dataclass
class Checkpoint:
    config: TarisConfig
    tensors: dict[str, np.ndarray]
    epochs_done: int = 0
    adam_t: int = 0
    history: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def adam_state(self, names: list[str]) -> AdamState:
        try:
            m = [self.tensors[f"adam.m/{n}"] for n in names]
            v = [self.tensors[f"adam.v/{n}"] for n in names]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks optimizer tensor {exc.args[0]!r}") from None
        return AdamState([x.astype(np.float64) for x in m], [x.astype(np.float64) for x in v], self.adam_t)

    def has_optimizer(self) -> bool:
        return any(k.startswith("adam.m/") for k in self.tensors)


def from_training(model: TarisModel, adam: AdamState | None, epochs_done: int,
                  history=None, rng: dict | None = None) -> Checkpoint:
    names = model.names()
    tensors = {f"param/{n}": model.params[n].value for n in names}
    if adam is not None:
        tensors.update({f"adam.m/{n}": m for n, m in zip(names, adam.m)})
        tensors.update({f"adam.v/{n}": v for n, v in zip(names, adam.v)})
    return Checkpoint(model.config, tensors, epochs_done, 0 if adam is None else adam.t,
                      list(history or []), dict(rng or {}))


def save_checkpoint(path: str | Path, ckpt: Checkpoint, precision: str = "f64") -> None:
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    entries, payloads = [], []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=_DTYPES[precision])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": precision})
        payloads.append(arr.tobytes())
    header = {"config": ckpt.config.to_dict(), "epochs_done": ckpt.epochs_done,
              "adam_t": ckpt.adam_t, "history": ckpt.history, "rng": ckpt.rng, "tensors": entries}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for p in payloads:
                fh.write(p)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, expect: TarisConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` every parameter shape is checked against
    a model built from that config."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"bad magic in checkpoint {path}")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise Truncated(f"truncated checkpoint {path}")
    (size,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + size:
        raise Truncated(f"truncated checkpoint {path}")
    try:
        header = json.loads(data[pos:pos + size])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    pos += size
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if len(data) < pos + nbytes:
            raise Truncated(f"truncated checkpoint {path} inside tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint {path}")
    ckpt = Checkpoint(TarisConfig.from_dict(header["config"]), tensors, header["epochs_done"],
                      header["adam_t"], header["history"], header["rng"])
    if expect is not None:
        check_shapes(ckpt, expect)
    return ckpt


def check_shapes(ckpt: Checkpoint, config: TarisConfig) -> None:
    reference = TarisModel.init(config, 0)
    params = ckpt.params
    for name in reference.names():
        want = reference.params[name].shape
        if name not in params:
            raise ShapeMismatch(name, want, ())
        if params[name].shape != want:
            raise ShapeMismatch(name, want, params[name].shape)
    extra = sorted(set(params) - set(reference.params))
    if extra:
        raise CheckpointError(f"checkpoint holds tensors unknown to this config: {extra}")


def restore_model(ckpt: Checkpoint, config: TarisConfig | None = None) -> TarisModel:
    """Model with the checkpoint's parameters; ``config`` may change run-time
    settings (windows, dropout) but not tensor shapes."""
    config = ckpt.config if config is None else config
    check_shapes(ckpt, config)
    params = {n: DiffArray(v.copy(), True, n) for n, v in ckpt.params.items()}
    return TarisModel(config, params)
