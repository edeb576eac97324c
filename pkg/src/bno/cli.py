"""Command-line entry point: ``bno <command> [options]``.

Commands: generate, dmd, train, predict, rollout, superres, report.

Tunables live in a flat ``RunConfig``. They come from defaults, then an
optional ``--config`` JSON file, then ``--set key=value`` overrides (values
are parsed as JSON when possible). Unknown keys are rejected before any work
starts. Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O failure. ``BNO_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_MODES,
    FieldSeries,
    SynthMode,
    WindowSpec,
    avg_pool,
    build_windows,
    generator_eigenvalues,
    load_csv_snapshots,
    load_field,
    save_field,
    synth_generate,
    zscore_fit_apply,
)
from .dmd import SnapshotMatrix, dmd_fit, dmd_reconstruct
from .errors import BnoError, ConfigError, IoError
from .evalx import (
    dataset_for,
    format_table,
    one_step_predict,
    report_for,
    rollout_dataset,
    superres_eval,
    write_history_csv,
    write_report_csv,
    write_rollout_csv,
)
from .model import BnoModel, CnnBaseline, DmdBaseline
from .neural import LrSchedule
from .train import train

log = logging.getLogger("bno")


@dataclass
class RunConfig:
    # data: a FLD1 file, a list of CSV snapshots, or the synthetic generator
    data: str | list | None = None
    modes: list | None = None  # rows of (re_w, im_w, re_a, im_a, kx, ky)
    nx: int = 32
    ny: int = 16
    nt: int | None = None  # defaults to the window span
    dt: float = 0.1
    eps: float = 0.1
    noise: float = 0.0
    pool: int = 1
    # windowing
    n: int = 20
    k: int = 2
    m: int = 80
    s: int = 1
    train_fraction: float = 0.7
    # model
    model: str = "bno"
    rank: int = 12
    layers: int = 1
    kernel: int = 5
    filters: list = field(default_factory=lambda: [16, 32, 16])
    # optimization
    batch_size: int = 10
    epochs: int = 200
    max_steps: int | None = None
    lr_boundaries: list = field(default_factory=lambda: [1500, 2500])
    lr_rates: list = field(default_factory=lambda: [1e-3, 1e-4, 1e-5])
    seed: int = 0
    out: str = "runs"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.n, self.k, self.m, self.s)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(tuple(self.lr_boundaries), tuple(self.lr_rates))

    def synth_modes(self) -> list[SynthMode]:
        if self.modes is None:
            return list(DEFAULT_MODES)
        return [SynthMode.from_list(row) for row in self.modes]

    def validate(self) -> None:
        try:
            self.window
            self.schedule
            self.synth_modes()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.model not in ("bno", "cnn", "dmd"):
            raise ConfigError(f"model must be bno, cnn or dmd, got {self.model!r}")
        if self.rank < 1 or self.layers < 1 or self.batch_size < 1 or self.epochs < 0 or self.pool < 1:
            raise ConfigError("rank, layers, batch_size and pool must be >= 1 and epochs >= 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")
        if not self.filters or any(int(c) < 1 for c in self.filters):
            raise ConfigError(f"filters must be positive channel counts, got {self.filters}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if min(self.nx, self.ny) < 1 or not self.dt > 0:
            raise ConfigError("nx, ny must be >= 1 and dt > 0")
        if self.nt is not None and self.nt < 1:
            raise ConfigError(f"nt must be >= 1, got {self.nt}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_config(path: str | None, overrides: Sequence[str], **direct) -> RunConfig:
    values: dict = {}
    if path:
        try:
            values.update(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = _parse_value(raw)
    values.update({k: v for k, v in direct.items() if v is not None})
    return RunConfig.from_mapping(values)


# -- data plumbing --------------------------------------------------------------------

def read_series(source, dt: float = 1.0) -> FieldSeries:
    if isinstance(source, (list, tuple)):
        return load_csv_snapshots(source, dt)
    if str(source).endswith(".csv"):
        return load_csv_snapshots([source], dt)
    return load_field(source)


def config_series(cfg: RunConfig) -> FieldSeries:
    if cfg.data is not None:
        f = read_series(cfg.data, cfg.dt)
    else:
        nt = cfg.nt or cfg.window.span
        f = synth_generate(cfg.synth_modes(), cfg.nx, cfg.ny, nt, cfg.dt, cfg.seed, cfg.eps, cfg.noise)
    return avg_pool(f, cfg.pool) if cfg.pool > 1 else f


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands ----------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, path) -> Path:
    nt = cfg.nt or cfg.window.span
    modes = cfg.synth_modes()
    f = synth_generate(modes, cfg.nx, cfg.ny, nt, cfg.dt, cfg.seed, cfg.eps, cfg.noise)
    path = Path(path)
    if path.parent != Path("."):
        _out_dir(path.parent)
    save_field(f, path)
    print(f"wrote {path}: nx={f.nx} ny={f.ny} nt={f.nt} dt={f.dt}")
    for lam in generator_eigenvalues(modes, cfg.dt):
        print(f"  lambda = {lam.real:+.12f} {lam.imag:+.12f}i")
    return path


def cmd_dmd(field_path, rank: int, out, dt: float | None = None, sweep: bool = True) -> Path:
    f = read_series(field_path, dt or 1.0)
    step = dt or f.dt
    snaps = SnapshotMatrix(f.snapshot_matrix(), step)
    model = dmd_fit(snaps, rank)
    out = _out_dir(out)
    amps = np.abs(model.amplitudes)
    _write_rows(
        out / "eigenvalues.csv",
        ["index", "lambda_re", "lambda_im", "omega_re", "omega_im", "amplitude_abs"],
        [
            [i, *(repr(float(v)) for v in (l.real, l.imag, w.real, w.imag, a))]
            for i, (l, w, a) in enumerate(zip(model.eig_discrete, model.eig_continuous, amps))
        ],
    )
    _write_rows(
        out / "modes.csv",
        ["point"] + [f"mode{j}_{part}" for j in range(model.rank) for part in ("re", "im")],
        [
            [p] + [repr(float(v)) for z in row for v in (z.real, z.imag)]
            for p, row in enumerate(model.modes)
        ],
    )
    if sweep:
        times = np.arange(snaps.n_time) * step
        norm = np.linalg.norm(snaps.values)
        rows = []
        for r in range(1, rank + 1):
            rec = dmd_reconstruct(dmd_fit(snaps, r), times).values
            rows.append([r, repr(float(np.linalg.norm(rec - snaps.values) / norm))])
        _write_rows(out / "rank_sweep.csv", ["rank", "relative_error"], rows)
    print(f"rank {model.rank} (requested {rank}); {model.rank} eigenvalues written to {out / 'eigenvalues.csv'}")
    return out


def build_model(cfg: RunConfig, norm_stats):
    kernel = (cfg.kernel, cfg.kernel)
    meta = {"config": {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out"}}
    if cfg.model == "bno":
        return BnoModel.init(
            cfg.layers, tuple(cfg.filters), kernel, cfg.rank, cfg.window, norm_stats, cfg.seed, meta=meta,
        )
    if cfg.model == "cnn":
        return CnnBaseline.init(tuple(cfg.filters), kernel, cfg.window, norm_stats, cfg.seed, meta=meta)
    return DmdBaseline(cfg.rank, cfg.s, 1.0, norm_stats, cfg.window, meta)


def cmd_train(cfg: RunConfig):
    try:
        import torch

        torch.set_num_threads(1)
    except ImportError:  # pragma: no cover
        pass
    raw = config_series(cfg)
    normed, stats = zscore_fit_apply(raw)
    ds = build_windows(normed, cfg.window, cfg.train_fraction)
    model = build_model(cfg, stats)
    model.meta["input_hash"] = raw.digest()
    out = _out_dir(cfg.out)
    if model.kind == "dmd" or cfg.epochs == 0:
        from .train import History

        hist = History()
    else:
        hist = train(model, ds, cfg.epochs, cfg.batch_size, cfg.schedule, cfg.seed, cfg.max_steps)
        model.meta["steps"] = hist.steps
    save_checkpoint(model, out / "model.bno")
    write_history_csv(hist, out / "history.csv")
    if hist.train:
        print(f"{hist.steps} steps, final train {hist.final_train:.4e}, validation {hist.final_validation:.4e}")
    print(f"wrote {out / 'model.bno'} and {out / 'history.csv'}")
    return model, hist


def _eval_dataset(model, data, pool: int = 1, train_fraction: float = 0.7):
    f = read_series(data)
    if pool > 1:
        f = avg_pool(f, pool)
    return dataset_for(model, f, model.window, train_fraction)


def cmd_predict(checkpoint, data, out, pool: int = 1) -> list[float]:
    model = load_checkpoint(checkpoint)
    ds = _eval_dataset(model, data, pool)
    errs = one_step_predict(model, ds)
    out = _out_dir(out)
    split = {int(i): "train" for i in ds.train_idx} | {int(i): "validation" for i in ds.val_idx}
    _write_rows(out / "predict.csv", ["window", "split", "mse"], [[i, split[i], repr(e)] for i, e in enumerate(errs)])
    print(f"one-step MSE over {len(errs)} windows: {np.mean(errs):.4e}")
    return errs


def cmd_rollout(checkpoint, data, out, steps: int, start: int | None = None, pool: int = 1):
    model = load_checkpoint(checkpoint)
    ds = _eval_dataset(model, data, pool)
    first = int(ds.val_idx[0]) if start is None else start
    res = rollout_dataset(model, ds, first, steps)
    out = _out_dir(out)
    write_rollout_csv(res, out / "rollout.csv")
    status = f"diverged at step {res.diverged_at}" if res.diverged_at else "stable"
    print(f"rollout of {steps} steps from window {first}: mean MSE {res.mean_mse:.4e}, {status}")
    return res


def _emit_report(rows, out: Path, stem: str = "report") -> None:
    write_report_csv(rows, out / f"{stem}.csv")
    text = format_table(rows, with_hash=True)
    (out / f"{stem}.txt").write_text(text + "\n")
    print(text)


def cmd_superres(checkpoint, data, out, partner=None, pool: int = 1):
    model = load_checkpoint(checkpoint)
    other = load_checkpoint(partner) if partner else None
    f = read_series(data)
    if pool > 1:
        f = avg_pool(f, pool)
    rows = superres_eval(model, f, model.window, other)
    _emit_report(rows, _out_dir(out), "superres")
    return rows


def cmd_report(checkpoints: Sequence, data: Sequence, out, pool: int = 1):
    rows = []
    for ckpt in checkpoints:
        model = load_checkpoint(ckpt)
        for d in data:
            rows.append(report_for(model, _eval_dataset(model, d, pool)))
    _emit_report(rows, _out_dir(out))
    return rows


# -- argument parsing ------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bno", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file of RunConfig keys")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)
        return sp

    g = with_config(sub.add_parser("generate", help="write a synthetic FLD1 field"))
    g.add_argument("--out", required=True, help="output .fld path")

    d = sub.add_parser("dmd", help="DMD spectrum, modes and rank sweep of a field file")
    d.add_argument("field")
    d.add_argument("--rank", type=int, default=12)
    d.add_argument("--dt", type=float)
    d.add_argument("--out", required=True)
    d.add_argument("--no-sweep", action="store_true")

    t = with_config(sub.add_parser("train", help="train a model and write a checkpoint"))
    t.add_argument("--out")

    for name, text in (("predict", "one-step prediction error per window"), ("rollout", "autoregressive rollout")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("checkpoint")
        sp.add_argument("data")
        sp.add_argument("--out", required=True)
        sp.add_argument("--pool", type=int, default=1)
        if name == "rollout":
            sp.add_argument("--steps", type=int, default=9)
            sp.add_argument("--start", type=int)

    s = sub.add_parser("superres", help="evaluate a checkpoint unchanged on another resolution")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--partner", help="CNN (or BNO) checkpoint for the cross-transfer rows")
    s.add_argument("--out", required=True)
    s.add_argument("--pool", type=int, default=1)

    r = sub.add_parser("report", help="loss table for checkpoints x data files")
    r.add_argument("--checkpoint", action="append", required=True)
    r.add_argument("--data", action="append", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--pool", type=int, default=1)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    c = args.command
    if c == "generate":
        cmd_generate(load_config(args.config, args.overrides, seed=args.seed), args.out)
    elif c == "dmd":
        cmd_dmd(args.field, args.rank, args.out, args.dt, not args.no_sweep)
    elif c == "train":
        cmd_train(load_config(args.config, args.overrides, seed=args.seed, out=args.out))
    elif c == "predict":
        cmd_predict(args.checkpoint, args.data, args.out, args.pool)
    elif c == "rollout":
        cmd_rollout(args.checkpoint, args.data, args.out, args.steps, args.start, args.pool)
    elif c == "superres":
        cmd_superres(args.checkpoint, args.data, args.out, args.partner, args.pool)
    elif c == "report":
        cmd_report(args.checkpoint, args.data, args.out, args.pool)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("BNO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except BnoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
