"""Epoch loop shared by the flow-matching and score-matching trainers."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidParameterError, TrainingError
from .nn import AdamW, VelocityNet
from .tensor import derive_seed, make_rng

log = logging.getLogger(__name__)

# loss_fn(model, h1_batch, rng, backward) -> loss; gradients land in model.grads
LossFn = Callable[[VelocityNet, np.ndarray, np.random.Generator, bool], float]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: VelocityNet
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    optimizer: AdamW | None = None

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.wall_seconds)])


def evaluate(model: VelocityNet, loss_fn: LossFn, data: np.ndarray, seed: int, batch_size: int) -> float:
    """Mean per-sample loss with a fixed noise stream, so epochs are comparable."""
    rng = make_rng(seed)
    total = 0.0
    for i in range(0, len(data), batch_size):
        batch = data[i : i + batch_size]
        total += loss_fn(model, batch, rng, False) * len(batch)
    return total / len(data)


def fit(
    model: VelocityNet,
    loss_fn: LossFn,
    train: np.ndarray,
    val: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    optimizer: OptimizerConfig,
    seed: int,
    max_steps: int | None = None,
    checkpoint_every: int = 0,
    on_checkpoint: Callable[[VelocityNet, int], None] | None = None,
    max_seconds: float | None = None,
) -> TrainResult:
    """Minibatch AdamW; returns the parameters with the lowest validation loss.

    Validation loss of the untrained model is recorded as epoch 0 and takes
    part in best-checkpoint selection. ``max_seconds`` stops training before
    an epoch that would, at the pace so far, end past the budget.
    """
    if epochs < 1 or batch_size < 1:
        raise InvalidParameterError("epochs and batch_size must be >= 1")
    if len(train) == 0:
        raise InvalidParameterError("training set is empty")
    train = np.asarray(train, dtype=np.complex128)
    val = np.asarray(val, dtype=np.complex128)
    val_seed = derive_seed(seed, 1)
    opt = AdamW(**optimizer.__dict__)
    params = model.parameters()
    grads = model.gradients()

    t_start = time.perf_counter()
    best = evaluate(model, loss_fn, val, val_seed, batch_size)
    result = TrainResult(model, [EpochRecord(0, float("nan"), best, 0.0)], 0, opt)
    best_params = {k: v.copy() for k, v in params.items()}

    step = 0
    for epoch in range(1, epochs + 1):
        rng = make_rng(derive_seed(seed, 0, epoch))
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for i in range(0, len(train), batch_size):
            batch = train[order[i : i + batch_size]]
            model.zero_grad()
            loss = loss_fn(model, batch, rng, True)
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {step} (epoch {epoch})")
            opt.step(params, grads)
            total += loss * len(batch)
            seen += len(batch)
            if max_steps is not None and step >= max_steps:
                break
        val_loss = evaluate(model, loss_fn, val, val_seed, batch_size)
        rec = EpochRecord(epoch, total / seen, val_loss, time.perf_counter() - t_start)
        result.history.append(rec)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, rec.train_loss, val_loss, rec.wall_seconds)
        if val_loss < best:
            best, result.best_epoch = val_loss, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if checkpoint_every and on_checkpoint is not None and epoch % checkpoint_every == 0:
            on_checkpoint(model, epoch)
        if max_steps is not None and step >= max_steps:
            break
        if max_seconds is not None and rec.wall_seconds * (epoch + 1) / epoch > max_seconds:
            log.info("stopping after epoch %d: time budget %.0fs", epoch, max_seconds)
            break

    for k, v in best_params.items():
        params[k][...] = v
    return result
