"""Model and training configuration with desk/paper presets.

Precedence when building a config: explicit overrides > JSON file > preset.
Unbounded windows are ``math.inf`` in memory and the string ``"inf"`` in JSON.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

INF = math.inf


class ConfigError(ValueError):
    pass


@dataclass
class TarisConfig:
    # architecture
    modality: str = "audio"
    fusion: str = "add"
    gate: str = "sigmoid"
    gate_k: float = 4.0
    layers: int = 2
    hidden: int = 64
    dff: int = 64
    dropout: float = 0.1
    d_audio: int = 16
    d_video: int = 16
    # connectivity
    e_la: float = 11
    e_lb: float = INF
    d_la: float = 1
    d_lb: float = 1
    window_b: int = 4
    av_ratio: float | None = 0.5
    video_e_la: float = INF
    video_e_lb: float = INF
    # objective and optimisation
    lam: float = 0.01
    budget_rule: str = "round"
    epochs: int = 50
    lr: float = 1e-3
    lr_final: float = 1e-4
    decay_frac: float = 100 / 120
    batch_size: int = 32
    stages: list = field(default_factory=lambda: [INF])
    seed: int = 0
    # reporting
    frame_ms: float = 30.0
    eval_every: int = 0
    eval_subset: int = 50

    def validate(self) -> "TarisConfig":
        if self.modality not in ("audio", "av"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.fusion not in ("add", "concat"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.budget_rule not in ("floor", "round"):
            raise ConfigError(f"unknown word budget rule {self.budget_rule!r}")
        if self.gate not in ("sigmoid", "scaled-sigmoid", "tanh"):
            raise ConfigError(f"unknown gate activation {self.gate!r}")
        for name in ("e_la", "e_lb", "d_la", "d_lb", "video_e_la", "video_e_lb", "window_b", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("layers", "hidden", "dff", "d_audio", "d_video", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.frame_ms <= 0:
            raise ConfigError("frame_ms must be positive")
        if not self.stages:
            raise ConfigError("at least one training stage is required")
        return self

    def to_dict(self) -> dict:
        return {k: _encode(v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TarisConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _decode(v) for k, v in data.items()}).validate()

    def replace(self, **changes) -> "TarisConfig":
        return dataclasses.replace(self, **changes).validate()


def _encode(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, list):
        return [_encode(x) for x in v]
    return v


def _decode(v):
    if isinstance(v, str) and v.lower() in ("inf", "+inf", "infinite", "-inf"):
        return float(v.replace("infinite", "inf"))
    if isinstance(v, list):
        return [_decode(x) for x in v]
    return v


PRESETS = {
    "desk": {},
    "paper": {"layers": 6, "hidden": 256, "dff": 256, "dropout": 0.1, "epochs": 120,
              "batch_size": 32, "stages": [INF, 10.0, 0.0, -5.0]},
}


def load_config(preset: str = "desk", path: str | Path | None = None, **overrides) -> TarisConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    data = TarisConfig().to_dict()
    data.update({k: _encode(v) for k, v in PRESETS[preset].items()})
    if path is not None:
        try:
            data.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data.update({k: _encode(v) for k, v in overrides.items() if v is not None})
    return TarisConfig.from_dict(data)


def parse_count(text: str) -> float:
    """Parse a window count from the command line ('inf' allowed)."""
    value = _decode(text)
    if isinstance(value, str):
        value = float(value) if "." in value else int(value)
    return value
