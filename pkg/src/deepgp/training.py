"""Minibatch ELBO maximisation with Adam, plateau LR decay and callbacks."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .model import DGPModel, Standardizer, elbo, evaluate

log = logging.getLogger(__name__)

STREAMS = ("init", "shuffle", "sampling", "evaluation")


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Counter-based generator for one named stream derived from ``seed``."""
    key = STREAMS.index(stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam descent step on the parameters named in ``grads``.

    ``grads`` are gradients of the quantity being minimised (the negative
    ELBO).  Parameters without a gradient are passed through unchanged.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    updated = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError("adam_step", f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        state.m[name], state.v[name] = m, v
        updated[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, state


# -- history and learning-rate schedule ---------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    lr: float
    seconds: float
    rmse: float = math.nan
    nlpd: float = math.nan


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def elbos(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)


class Callback:
    def on_train_begin(self, trainer: "Trainer") -> None:
        pass

    def on_epoch_end(self, trainer: "Trainer", record: EpochRecord) -> None:
        pass

    def on_train_end(self, trainer: "Trainer") -> None:
        pass


class ReduceLROnPlateau(Callback):
    """Multiply the learning rate by ``factor`` when the smoothed ELBO stalls.

    The smoothed ELBO is the mean of the last ``window`` epoch ELBOs.  An
    epoch counts as an improvement when it beats the best smoothed value by
    more than ``min_delta``.  After each reduction the schedule waits
    ``cooldown`` epochs (default: ``patience``) before counting again.
    """

    def __init__(
        self,
        patience: int = 20,
        factor: float = 0.5,
        min_lr: float = 1e-5,
        min_delta: float = 1e-4,
        cooldown: int | None = None,
        window: int = 1,
    ):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.cooldown = patience if cooldown is None else cooldown
        self.window = max(1, window)
        self.reset()

    def reset(self) -> None:
        self.best = -math.inf
        self.wait = 0
        self.cooldown_left = 0
        self.recent: deque[float] = deque(maxlen=self.window)

    def update(self, elbo_value: float, lr: float) -> float:
        self.recent.append(elbo_value)
        smoothed = float(np.mean(self.recent))
        cooling = self.cooldown_left > 0
        if cooling:
            self.cooldown_left -= 1
        if smoothed > self.best + self.min_delta:
            self.best = smoothed
            self.wait = 0
            return lr
        if cooling:
            return lr
        self.wait += 1
        if self.wait >= self.patience and lr > self.min_lr:
            lr = max(lr * self.factor, self.min_lr)
            self.cooldown_left = self.cooldown
            self.wait = 0
        return lr

    def on_epoch_end(self, trainer: "Trainer", record: EpochRecord) -> None:
        new_lr = self.update(record.elbo, trainer.optimizer.learning_rate)
        if new_lr != trainer.optimizer.learning_rate:
            log.info("epoch %d: reducing learning rate to %g", record.epoch, new_lr)
            trainer.optimizer.learning_rate = new_lr


def reduce_lr_on_plateau(
    history: TrainHistory,
    patience: int,
    factor: float,
    min_lr: float,
    min_delta: float = 1e-4,
    cooldown: int | None = None,
    window: int = 1,
) -> float:
    """Learning rate the plateau schedule arrives at after replaying ``history``.

    Replay starts from the learning rate of the first record.
    """
    if not history.records:
        raise ValueError("empty history")
    schedule = ReduceLROnPlateau(patience, factor, min_lr, min_delta, cooldown, window)
    lr = history.records[0].lr
    for record in history.records:
        lr = schedule.update(record.elbo, lr)
    return lr


# -- checkpoint and logging callbacks -----------------------------------------


class ModelCheckpoint(Callback):
    """Write a checkpoint whenever the epoch ELBO beats the best seen so far."""

    def __init__(self, path: str | os.PathLike, extra: Mapping | None = None, config: Mapping | None = None):
        self.path = Path(path)
        self.extra = dict(extra or {})
        self.config = config
        self.best = -math.inf
        self.saved = False

    def on_epoch_end(self, trainer, record):
        from .checkpoint import save_checkpoint

        if record.elbo > self.best:
            self.best = record.elbo
            save_checkpoint(trainer.model, self.path, trainer=trainer, extra=self.extra, config=self.config)
            self.saved = True


class CSVLogger(Callback):
    HEADER = ("epoch", "elbo", "lr", "rmse", "nlpd", "seconds")

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def on_train_begin(self, trainer):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.HEADER)

    def on_epoch_end(self, trainer, record):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [record.epoch, repr(record.elbo), repr(record.lr), repr(record.rmse), repr(record.nlpd), f"{record.seconds:.6f}"]
            )


# -- training loop ------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 500
    seed: int = 0
    eval_samples: int = 100
    metrics_every: int = 1
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    plateau_min_delta: float = 1e-4
    plateau_window: int = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message if checkpoint is None else f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


class Trainer:
    """Holds everything a fit mutates: model parameters, optimiser and RNG streams."""

    def __init__(self, model: DGPModel, config: TrainConfig, trainable: Iterable[str] | None = None):
        self.model = model
        self.config = config
        names = list(model.parameters())
        if trainable is not None:
            trainable = list(trainable)
            unknown = set(trainable) - set(names)
            if unknown:
                raise KeyError(f"unknown trainable parameters: {sorted(unknown)}")
            names = [n for n in names if n in set(trainable)]
        self.trainable = names
        self.optimizer = AdamState(learning_rate=config.learning_rate)
        self.streams = {name: make_rng(config.seed, name) for name in ("shuffle", "sampling")}
        self.history = TrainHistory()
        self.epoch = 0
        self.best_elbo = -math.inf

    def loss_and_grads(self, X, Y, indices) -> tuple[float, dict[str, np.ndarray]]:
        params = self.model.parameters()
        bindings = {k: params[k] for k in self.trainable}
        root, leaves = ad.forward(
            lambda p: -elbo(self.model, X, Y, self.streams["sampling"], p, indices),
            bindings,
        )
        return float(root.value), ad.backward(root, leaves)

    def run_epoch(self, X: np.ndarray, Y: np.ndarray) -> float:
        n = X.shape[0]
        batch = min(self.config.batch_size, n)
        order = self.streams["shuffle"].permutation(n)
        total = 0.0
        steps = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = self.loss_and_grads(X[idx], Y[idx], idx)
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite ELBO")
            params, _ = adam_step(self.model.parameters(), grads, self.optimizer)
            self.model.set_parameters({k: params[k] for k in grads})
            total += -loss
            steps += 1
        return total / steps


def fit(
    model: DGPModel,
    X: np.ndarray,
    Y: np.ndarray,
    config: TrainConfig | None = None,
    callbacks: Sequence[Callback] = (),
    trainable: Iterable[str] | None = None,
    metrics_data: tuple[np.ndarray, np.ndarray, Standardizer | None] | None = None,
    trainer: Trainer | None = None,
) -> TrainHistory:
    """Maximise the ELBO over shuffled minibatches.

    Each epoch's record holds the mean minibatch ELBO, the learning rate in
    use, wall time and (every ``metrics_every`` epochs) RMSE/NLPD on
    ``metrics_data`` (default: the training data), evaluated with a fresh
    evaluation stream so the numbers can be reproduced from a checkpoint.
    Deterministic for a given ``config.seed``.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != model.num_data or Y.shape[0] != model.num_data:
        raise ValueError(f"model expects {model.num_data} datapoints, got {X.shape[0]}")
    trainer = trainer or Trainer(model, config, trainable)
    if metrics_data is None:
        metrics_data = (X, Y, None)
    for cb in callbacks:
        cb.on_train_begin(trainer)
    start = time.perf_counter()
    for _ in range(config.epochs):
        epoch = trainer.epoch
        lr = trainer.optimizer.learning_rate
        try:
            value = trainer.run_epoch(X, Y)
        except (FloatingPointError, ad.NotPositiveDefiniteError) as exc:
            checkpoint = next(
                (cb.path for cb in callbacks if isinstance(cb, ModelCheckpoint) and cb.saved),
                None,
            )
            raise TrainingDiverged(f"epoch {epoch}: {exc}", checkpoint) from exc
        record = EpochRecord(epoch=epoch, elbo=value, lr=lr, seconds=time.perf_counter() - start)
        if config.eval_samples > 0 and config.metrics_every > 0 and (epoch + 1) % config.metrics_every == 0:
            mx, my, scaler = metrics_data
            metrics = evaluate(model, mx, my, config.eval_samples, make_rng(config.seed, "evaluation"), scaler)
            record.rmse, record.nlpd = metrics["rmse"], metrics["nlpd"]
        trainer.history.append(record)
        trainer.best_elbo = max(trainer.best_elbo, value)
        trainer.epoch += 1
        for cb in callbacks:
            cb.on_epoch_end(trainer, record)
    for cb in callbacks:
        cb.on_train_end(trainer)
    return trainer.history


def default_callbacks(config: TrainConfig) -> list[Callback]:
    return [
        ReduceLROnPlateau(
            config.plateau_patience,
            config.plateau_factor,
            config.min_lr,
            config.plateau_min_delta,
            window=config.plateau_window,
        )
    ]


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


__all__ = [
    "AdamState",
    "adam_step",
    "CSVLogger",
    "Callback",
    "EpochRecord",
    "ModelCheckpoint",
    "ReduceLROnPlateau",
    "TrainConfig",
    "TrainHistory",
    "Trainer",
    "TrainingDiverged",
    "default_callbacks",
    "fit",
    "make_rng",
    "reduce_lr_on_plateau",
    "smoothed",
]
