"""Evaluation protocols: one-step prediction, rollout, zero-shot super-resolution.

Models are anything with ``predict(batch) -> batch`` plus ``norm_stats``
and ``window`` (BnoModel, CnnBaseline, DmdBaseline).
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, FieldSeries, WindowSpec, build_windows
from .errors import IndexOutOfRange, NumericalError, ShapeMismatch
from .model import BnoModel, CnnBaseline, koopman_branch, transfer_weights
from .neural import conv2d_forward
from .train import evaluate, predict_windows

DIVERGENCE_FACTOR = 1e6


@dataclass
class RolloutResult:
    steps: int
    predictions: list[np.ndarray] = field(default_factory=list)
    per_step_mse: list[float] = field(default_factory=list)
    diverged_at: int | None = None  # 1-based step that blew up

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_step_mse)) if self.per_step_mse else float("nan")


@dataclass
class EvalReport:
    model: str
    resolution: str
    train_loss: float
    validation_loss: float
    dmd_seconds: float = float("nan")
    cnn_seconds: float = float("nan")
    input_hash: str = ""

    @property
    def gap(self) -> float:
        return abs(self.train_loss - self.validation_loss)


def _check_compatible(model, dataset: Dataset) -> None:
    if dataset.inputs.shape[2] != model.window.n:
        raise ShapeMismatch(f"model expects {model.window.n}-snapshot windows, data has {dataset.inputs.shape[2]}")


def one_step_predict(model, dataset: Dataset, indices=None) -> list[float]:
    """Per-window MSE of a single forward pass against the label window."""
    _check_compatible(model, dataset)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    pred = predict_windows(model, dataset, idx)
    err = np.square(pred - dataset.labels[idx])
    return [float(np.mean(e)) for e in err]


def rollout(model, initial_window: np.ndarray, steps: int, truth: Sequence[np.ndarray] | None = None) -> RolloutResult:
    """Autoregressive window-to-window forecast.

    The whole predicted window becomes the next input. ``truth[t]`` is the
    expected output of step ``t + 1``. Stops at the first step whose output
    is non-finite or exceeds ``DIVERGENCE_FACTOR`` times the initial
    window's max magnitude.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if truth is not None and len(truth) < steps:
        raise ValueError(f"need {steps} ground-truth windows, got {len(truth)}")
    x = np.asarray(initial_window, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatch(f"initial window must be (N, T, 1), got {x.shape}")
    scale = float(np.max(np.abs(x)))
    limit = DIVERGENCE_FACTOR * scale
    res = RolloutResult(steps)
    for t in range(1, steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                y = np.asarray(model.predict(x[None]), dtype=np.float64)[0]
        except NumericalError:
            res.diverged_at = t
            break
        res.predictions.append(y)
        if truth is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                res.per_step_mse.append(float(np.mean(np.square(y - truth[t - 1]))))
        peak = float(np.max(np.abs(y)))
        if not np.isfinite(peak) or peak > limit:
            res.diverged_at = t
            break
        x = y
    return res


def rollout_dataset(model, dataset: Dataset, start: int, steps: int) -> RolloutResult:
    """Roll out from window ``start`` comparing against later label windows."""
    s = dataset.window.s
    last = start + (steps - 1) * s
    if start < 0 or last >= len(dataset):
        raise IndexOutOfRange(f"rollout of {steps} steps from window {start} leaves the dataset")
    truth = [dataset.labels[start + t * s] for t in range(steps)]
    return rollout(model, dataset.inputs[start], steps, truth)


def rollout_starts(dataset: Dataset, steps: int) -> list[int]:
    """Validation windows that leave room for ``steps`` ground-truth windows."""
    s = dataset.window.s
    return [int(i) for i in dataset.val_idx if i + (steps - 1) * s < len(dataset)]


def mean_rollout_mse(model, dataset: Dataset, steps: int, starts: Sequence[int] | None = None) -> float:
    starts = rollout_starts(dataset, steps) if starts is None else starts
    vals = []
    for i in starts:
        r = rollout_dataset(model, dataset, i, steps)
        if r.diverged_at is not None:
            return float("inf")
        vals.append(r.mean_mse)
    return float(np.mean(vals))


def model_tag(model) -> str:
    if model.kind == "bno":
        return f"{len(model.layers)}-layer BNO"
    return {"cnn": "CNN", "dmd": "DMD"}.get(model.kind, model.kind)


def dataset_for(model, fine: FieldSeries, window: WindowSpec | None = None, train_fraction: float = 0.7) -> Dataset:
    """Window ``fine`` after normalizing it with the model's own statistics."""
    w = window or model.window
    normed = FieldSeries(model.norm_stats.apply(fine.values), fine.dt)
    ds = build_windows(normed, w, train_fraction)
    ds.source_hash = fine.digest()
    return ds


def report_for(model, dataset: Dataset, tag: str | None = None) -> EvalReport:
    _check_compatible(model, dataset)
    return EvalReport(
        model=tag or model_tag(model),
        resolution=dataset.resolution,
        train_loss=evaluate(model, dataset, dataset.train_idx),
        validation_loss=evaluate(model, dataset, dataset.val_idx),
        input_hash=dataset.source_hash,
    )


def superres_eval(
    model,
    fine: FieldSeries,
    window: WindowSpec | None = None,
    partner=None,
    train_fraction: float = 0.7,
) -> list[EvalReport]:
    """Evaluate ``model`` unchanged on a (finer) field series.

    The Koopman branch is refitted on the fine windows; convolution weights
    are used as trained. With ``partner`` (a CNN baseline for a BNO, or the
    reverse) the two cross-architecture transfers are evaluated as well.
    """
    ds = dataset_for(model, fine, window, train_fraction)
    rows = [report_for(model, ds)]
    if partner is not None:
        bno, cnn = (model, partner) if model.kind == "bno" else (partner, model)
        if bno.kind != "bno" or cnn.kind != "cnn":
            raise TypeError("cross transfer needs one BNO and one CNN baseline")
        rows.append(report_for(transfer_weights(bno, cnn), ds, "BNO->CNN"))
        rows.append(report_for(transfer_weights(cnn, bno), ds, "CNN->BNO"))
    return rows


def line_profile(values, x_index: int, t_index: int, ny: int | None = None, channel: int = 0) -> np.ndarray:
    """Values along y at fixed x and time.

    ``values`` is a FieldSeries or a flattened ``(nx*ny, T, C)`` tensor, in
    which case ``ny`` is required.
    """
    if isinstance(values, FieldSeries):
        arr = values.values
    else:
        tensor = np.asarray(values)
        if tensor.ndim != 3 or ny is None or tensor.shape[0] % ny:
            raise ShapeMismatch("flattened tensors need (nx*ny, T, C) and a matching ny")
        arr = tensor[..., channel].reshape(tensor.shape[0] // ny, ny, tensor.shape[1])
    nx, _, nt = arr.shape
    if not (0 <= x_index < nx and 0 <= t_index < nt):
        raise IndexOutOfRange(f"(x={x_index}, t={t_index}) outside {nx} x {nt}")
    return arr[x_index, :, t_index].copy()


def timing_bench(model, inputs: np.ndarray, repeats: int = 3) -> tuple[float, float, float]:
    """Best-of wall-clock seconds for the Koopman branch and the CNN branch on one batch.

    Returns ``(dmd_seconds, cnn_seconds, dmd / cnn)``.
    """
    if len(inputs) == 0:
        raise ValueError("timing needs a non-empty batch")
    if model.kind == "bno":
        layer = model.layers[0]
        rank, horizon, convs = layer.dmd_rank, layer.dmd_horizon, layer.cnn_branch
    elif model.kind == "cnn":
        rank, horizon, convs = 12, model.window.s, model.cnn_branch
    else:
        raise TypeError("timing needs a model with a CNN branch")
    x = np.asarray(inputs)
    xc = x.astype(convs[0].weights.dtype)

    def best(fn) -> float:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    def cnn():
        h = xc
        for c in convs:
            h = conv2d_forward(h, c)

    dmd_s = best(lambda: koopman_branch(x, rank, horizon))
    cnn_s = best(cnn)
    return dmd_s, cnn_s, dmd_s / cnn_s


# -- tables -----------------------------------------------------------------------

REPORT_COLUMNS = ("model", "resolution", "train_loss", "validation_loss", "overfitting_gap", "input_hash")


def _fmt(x: float) -> str:
    return f"{x:.6e}"


def write_report_csv(rows: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.resolution, _fmt(r.train_loss), _fmt(r.validation_loss), _fmt(r.gap), r.input_hash])


def format_table(rows: Sequence[EvalReport], with_hash: bool = False) -> str:
    header = ["Model", "Resolution", "Training Loss", "Validation Loss", "Overfitting Gap"]
    if with_hash:
        header.append("Input")
    body = []
    for r in rows:
        line = [r.model, r.resolution, _fmt(r.train_loss), _fmt(r.validation_loss), _fmt(r.gap)]
        if with_hash:
            line.append(r.input_hash[:12])
        body.append(line)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt.format(*header), rule] + [fmt.format(*b) for b in body])


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train", "validation"])
        for e, tr, va in zip(history.epochs, history.train, history.validation):
            w.writerow([e, repr(float(tr)), repr(float(va))])


def write_rollout_csv(result: RolloutResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mse", "max_abs"])
        for t, y in enumerate(result.predictions, start=1):
            mse = result.per_step_mse[t - 1] if t - 1 < len(result.per_step_mse) else float("nan")
            w.writerow([t, repr(mse), repr(float(np.max(np.abs(y))))])
