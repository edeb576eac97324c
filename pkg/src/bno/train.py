"""Mini-batch training with Adam and a piecewise-constant learning rate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import NonFinite
from .model import bno_backward
from .neural import AdamState, LrSchedule, adam_step, lr_at

log = logging.getLogger(__name__)


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)
    steps: int = 0
    fallbacks: int = 0

    def append(self, epoch: int, train: float, validation: float) -> None:
        self.epochs.append(epoch)
        self.train.append(train)
        self.validation.append(validation)

    @property
    def final_train(self) -> float:
        return self.train[-1]

    @property
    def final_validation(self) -> float:
        return self.validation[-1]


def koopman_cache(model, dataset: Dataset) -> tuple[np.ndarray | None, int]:
    """First-layer Koopman branch for every window (None for models without one).

    Cached per (model kind, rank, horizon, dt) on the dataset: the branch
    only depends on raw inputs, so it is computed once and reused across epochs.
    """
    if model.kind == "cnn":
        return None, 0
    if model.kind == "bno":
        first = model.layers[0]
        key = ("koopman", first.dmd_rank, first.dmd_horizon, model.dt)
    else:
        key = ("koopman", model.rank, model.horizon, model.dt)
    hit = dataset._koopman.get(key)
    if hit is None:
        res = model.koopman(dataset.inputs)
        hit = (res.values, res.fallbacks)
        dataset._koopman[key] = hit
        if res.fallbacks:
            log.info("Koopman branch fell back to zero on %d of %d windows", res.fallbacks, len(dataset))
    return hit


def predict_windows(model, dataset: Dataset, indices=None, batch_size: int = 1) -> np.ndarray:
    """Model output for the selected windows as float64.

    One window per forward pass by default, so a window's prediction does
    not depend on which other windows share its batch.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    cache, _ = koopman_cache(model, dataset)
    outs = []
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        k = None if cache is None else cache[sel]
        outs.append(np.asarray(model.predict(dataset.inputs[sel], k), dtype=np.float64))
    if not outs:
        return np.zeros((0,) + dataset.inputs.shape[1:])
    return np.concatenate(outs)


def evaluate(model, dataset: Dataset, indices, batch_size: int = 1) -> float:
    """Mean squared error over the selected windows (each window weighted equally)."""
    idx = np.asarray(indices)
    if idx.size == 0:
        return float("nan")
    pred = predict_windows(model, dataset, idx, batch_size)
    return float(np.mean(np.square(pred - dataset.labels[idx])))


def train(
    model,
    dataset: Dataset,
    epochs: int,
    batch_size: int = 10,
    schedule: LrSchedule | None = None,
    seed: int = 0,
    max_steps: int | None = None,
    validate: bool = True,
) -> History:
    """Train ``model`` in place on ``dataset.train_idx``.

    Each epoch is one shuffled pass over the training windows; the learning
    rate is looked up by optimizer step. The recorded training loss of an
    epoch is the window-weighted mean of its mini-batch losses; the
    validation loss is a full evaluation after the epoch. Stops early once
    ``max_steps`` optimizer steps have been taken.
    """
    schedule = schedule or LrSchedule()
    params = model.params()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(seed)
    cache, fallbacks = koopman_cache(model, dataset)
    hist = History(fallbacks=fallbacks)
    train_idx = np.asarray(dataset.train_idx)
    for epoch in range(1, epochs + 1):
        if max_steps is not None and state.step >= max_steps:
            break
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            if max_steps is not None and state.step >= max_steps:
                break
            sel = order[start:start + batch_size]
            k = None if cache is None else cache[sel]
            loss, grads = bno_backward(model, dataset.inputs[sel], dataset.labels[sel], k)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFinite(f"non-finite loss/gradient at epoch {epoch}, step {state.step}, windows {sel.tolist()}")
            adam_step(params, grads, state, lr_at(schedule, state.step))
            total += loss * len(sel)
            count += len(sel)
        if count == 0:
            break
        val = evaluate(model, dataset, dataset.val_idx) if validate else float("nan")
        hist.append(epoch, total / count, val)
        log.debug("epoch %d step %d train %.4e val %.4e", epoch, state.step, total / count, val)
    hist.steps = state.step
    return hist
