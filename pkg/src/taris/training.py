"""Mini-batch training with a staged noise curriculum.

Each stage trains ``config.epochs`` epochs at one SNR (``inf`` means the corpus
audio as stored) and hands its parameters and optimizer moments to the next.
All randomness is derived from ``(seed, stage, epoch)``, so a run stopped after
any epoch and resumed from its checkpoint replays the uninterrupted run exactly.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint, from_training, restore_model, save_checkpoint
from .config import ConfigError, TarisConfig
from .model import TarisModel, forward, make_batch, total_loss
from .synthdata import SyntheticSample, mix_noise

log = logging.getLogger(__name__)


def learning_rate(config: TarisConfig, epoch: int) -> float:
    """Step schedule within a stage: ``lr`` then ``lr_final`` after ``decay_frac`` of the epochs."""
    switch = int(round(config.decay_frac * config.epochs))
    return config.lr if epoch < switch else config.lr_final


def check_corpus(config: TarisConfig, samples: list[SyntheticSample]) -> None:
    if not samples:
        raise ConfigError("training corpus is empty")
    d_a = samples[0].audio.shape[1]
    if d_a != config.d_audio:
        raise ConfigError(f"corpus audio features have {d_a} dims, model expects {config.d_audio}")
    if config.modality == "av":
        d_v = samples[0].video.shape[1]
        if d_v != config.d_video:
            raise ConfigError(f"corpus video features have {d_v} dims, model expects {config.d_video}")


def stage_samples(samples, snr: float, seed: int, stage: int, epoch: int) -> list[SyntheticSample]:
    if math.isinf(snr) and snr > 0:
        return samples
    return [mix_noise(s, snr, [seed, stage, epoch, i, 3]) for i, s in enumerate(samples)]


def _batches(samples, config: TarisConfig, order):
    av = config.modality == "av"
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        yield make_batch([samples[i].audio for i in idx], [samples[i].transcript for i in idx],
                         [samples[i].video for i in idx] if av else None)


def train_epoch(model: TarisModel, adam: dc.AdamState, samples, stage: int, epoch: int):
    """One pass over ``samples``; returns the new optimizer state and the mean loss parts."""
    cfg = model.config
    snr = float(cfg.stages[stage])
    data = stage_samples(samples, snr, cfg.seed, stage, epoch)
    order = np.random.default_rng([cfg.seed, stage, epoch, 1]).permutation(len(data))
    drop_rng = np.random.default_rng([cfg.seed, stage, epoch, 2])
    lr = learning_rate(cfg, epoch)
    params = model.param_list()
    totals = {"loss": 0.0, "ce": 0.0, "word": 0.0}
    steps = 0
    for batch in _batches(data, cfg, order):
        with dc.Tape() as tape:
            trace = forward(model, batch, True, drop_rng)
            loss, parts = total_loss(trace, batch, cfg.lam)
        grads = dc.backward(loss, tape)
        adam = dc.adam_step(params, [dc.grad_of(grads, p) for p in params], adam, lr)
        for k in totals:
            totals[k] += parts[k]
        steps += 1
    means = {k: v / steps for k, v in totals.items()}
    return adam, means | {"lr": lr, "snr": snr if math.isfinite(snr) else "inf"}


@dataclass
class TrainResult:
    model: TarisModel
    adam: dc.AdamState
    epochs_done: int
    history: list = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        return from_training(self.model, self.adam, self.epochs_done, self.history,
                             {"scheme": "derived", "seed": self.model.config.seed})


def train(config: TarisConfig, samples: list[SyntheticSample], *, resume: Checkpoint | None = None,
          stop_after: int | None = None, checkpoint_dir: str | Path | None = None,
          evaluate: Callable[[TarisModel], dict] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``config`` on ``samples``.

    ``stop_after`` caps the total number of completed epochs (counted across stages,
    including those already in ``resume``).  ``evaluate`` is called every
    ``config.eval_every`` epochs and at the end of each stage; its dict is merged
    into that epoch's log entry.
    """
    config.validate()
    check_corpus(config, samples)
    if resume is None:
        model = TarisModel.init(config, config.seed)
        adam = dc.AdamState.zeros_like(model.param_list())
        done, history = 0, []
    else:
        model = restore_model(resume, config)
        adam = resume.adam_state(model.names()) if resume.has_optimizer() else \
            dc.AdamState.zeros_like(model.param_list())
        done, history = resume.epochs_done, list(resume.history)
    total = len(config.stages) * config.epochs
    end = total if stop_after is None else min(total, stop_after)
    out = None if checkpoint_dir is None else Path(checkpoint_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while done < end:
        stage, epoch = divmod(done, config.epochs)
        t0 = time.perf_counter()
        adam, parts = train_epoch(model, adam, samples, stage, epoch)
        done += 1
        entry = {"stage": stage, "epoch": epoch + 1, **parts,
                 "seconds": round(time.perf_counter() - t0, 3)}
        stage_end = epoch + 1 == config.epochs
        if evaluate is not None and (stage_end or (config.eval_every and (epoch + 1) % config.eval_every == 0)):
            entry.update(evaluate(model))
        history.append(entry)
        log.info("stage %d epoch %d: %s", stage, epoch + 1,
                 {k: v for k, v in entry.items() if k not in ("stage", "epoch")})
        if on_epoch is not None:
            on_epoch(entry)
        if out is not None and stage_end:
            result = TrainResult(model, adam, done, history)
            save_checkpoint(out / f"stage{stage}.ckpt", result.checkpoint())
    result = TrainResult(model, adam, done, history)
    if out is not None:
        save_checkpoint(out / "last.ckpt", result.checkpoint())
    return result
