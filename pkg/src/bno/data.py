"""Field series containers, preprocessing and windowed datasets.

A field series is a real scalar field sampled on an ``nx x ny`` grid at
``nt`` equally spaced instants. Models never see the 2-D grid directly:
each snapshot is flattened row-major (x outer, y inner) into a column of
length ``nx * ny`` and windows of ``n`` snapshots become ``(nx*ny, n, 1)``
tensors.
"""
from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagic,
    BadSpec,
    ConstantField,
    IoError,
    NonFinite,
    NotDivisible,
    VersionMismatch,
    WindowOutOfRange,
)

FIELD_MAGIC = b"FLD1"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sHIIId")


@dataclass(frozen=True)
class FieldSeries:
    values: np.ndarray  # (nx, ny, nt)
    dt: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"field values must be (nx, ny, nt) with every extent >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("field contains NaN or Inf")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "values", v)

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def nt(self) -> int:
        return self.values.shape[2]

    @property
    def resolution(self) -> str:
        return f"{self.nx}x{self.ny}"

    def snapshot_matrix(self) -> np.ndarray:
        """``(nx*ny, nt)`` matrix whose columns are flattened snapshots."""
        return self.values.reshape(self.nx * self.ny, self.nt)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.values.shape, dtype="<u4").tobytes())
        h.update(struct.pack("<d", self.dt))
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConstantField(f"normalization std must be positive, got {self.std}")

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x) * self.std + self.mean


def zscore_fit(f: FieldSeries) -> NormStats:
    mean = float(np.mean(f.values))
    std = float(np.std(f.values))
    if not std > 0 or std <= 1e-14 * max(abs(mean), 1.0):
        raise ConstantField("cannot normalize a constant field")
    return NormStats(mean, std)


def zscore_fit_apply(f: FieldSeries) -> tuple[FieldSeries, NormStats]:
    """Global Z-score: one mean and one standard deviation for the whole series."""
    stats = zscore_fit(f)
    return FieldSeries(stats.apply(f.values), f.dt), stats


def denormalize(f: FieldSeries, stats: NormStats) -> FieldSeries:
    return FieldSeries(stats.invert(f.values), f.dt)


def avg_pool(f: FieldSeries, factor: int) -> FieldSeries:
    if factor < 1:
        raise ValueError(f"pooling factor must be >= 1, got {factor}")
    if f.nx % factor or f.ny % factor:
        raise NotDivisible(f"grid {f.nx}x{f.ny} not divisible by {factor}")
    v = f.values.reshape(f.nx // factor, factor, f.ny // factor, factor, f.nt)
    return FieldSeries(v.mean(axis=(1, 3)), f.dt)


# -- windowing ---------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    """``n`` snapshots per window, stride ``k``, ``m`` windows, label shift ``s``."""

    n: int = 20
    k: int = 2
    m: int = 350
    s: int = 1

    def __post_init__(self):
        if self.n < 2 or self.k < 1 or self.m < 1 or self.s < 0:
            raise ValueError(f"invalid window spec {self}")

    @property
    def span(self) -> int:
        """Number of raw snapshots the windows and labels reach into."""
        return (self.s + self.m + self.n - 1) * self.k

    def check(self, nt: int) -> None:
        if self.span > nt:
            raise WindowOutOfRange(f"{self} needs {self.span} snapshots, series has {nt}")

    def as_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "m": self.m, "s": self.s}


@dataclass
class Dataset:
    inputs: np.ndarray  # (m, N, n, 1)
    labels: np.ndarray  # (m, N, n, 1)
    train_idx: np.ndarray
    val_idx: np.ndarray
    window: WindowSpec
    nx: int
    ny: int
    source_hash: str = ""
    _koopman: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_space(self) -> int:
        return self.inputs.shape[1]

    @property
    def resolution(self) -> str:
        return f"{self.nx}x{self.ny}"


def window_indices(w: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """0-based snapshot indices of every input and label window, each (m, n).

    With 1-based window ``i`` and slot ``j`` the input snapshot is
    ``(i + j - 1) k`` and the label snapshot ``(s + i + j - 1) k``; snapshot
    number ``q`` lives at array index ``q - 1``.
    """
    i = np.arange(1, w.m + 1)[:, None]
    j = np.arange(1, w.n + 1)[None, :]
    inputs = (i + j - 1) * w.k - 1
    labels = (w.s + i + j - 1) * w.k - 1
    return inputs, labels


def split_indices(m: int, train_fraction: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Chronological split: the first ``round(train_fraction * m)`` windows train."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n_train = int(math.floor(train_fraction * m + 0.5))
    n_train = min(max(n_train, 1), m)
    if m >= 2 and train_fraction < 1.0:
        n_train = min(n_train, m - 1)
    idx = np.arange(m)
    return idx[:n_train], idx[n_train:]


def build_windows(f: FieldSeries, w: WindowSpec, train_fraction: float = 0.7) -> Dataset:
    w.check(f.nt)
    cols = f.snapshot_matrix()
    in_idx, lab_idx = window_indices(w)
    inputs = np.ascontiguousarray(cols[:, in_idx].transpose(1, 0, 2)[..., None])
    labels = np.ascontiguousarray(cols[:, lab_idx].transpose(1, 0, 2)[..., None])
    train_idx, val_idx = split_indices(w.m, train_fraction)
    return Dataset(inputs, labels, train_idx, val_idx, w, f.nx, f.ny, source_hash=f.digest())


# -- synthetic fields ---------------------------------------------------------

@dataclass(frozen=True)
class SynthMode:
    """One travelling-wave component ``a exp(2 pi i (kx x + ky y)) exp(omega t)``.

    The spatial pattern is a product of complex sinusoids in x and y, so the
    real part of a mode with non-zero wavenumber spans two real spatial
    patterns and contributes the conjugate pair ``exp(omega dt)``,
    ``exp(conj(omega) dt)`` to the DMD spectrum. A mode with ``kx = ky = 0``
    and real ``omega`` and ``amplitude`` is a single real mode.
    """

    omega: complex
    amplitude: complex = 1.0
    kx: int = 1
    ky: int = 0

    @property
    def is_real(self) -> bool:
        return (
            self.kx == 0 and self.ky == 0
            and complex(self.omega).imag == 0 and complex(self.amplitude).imag == 0
        )

    def discrete_eigenvalues(self, dt: float) -> list[complex]:
        lam = complex(np.exp(complex(self.omega) * dt))
        return [lam] if self.is_real else [lam, lam.conjugate()]

    def as_list(self) -> list:
        om, a = complex(self.omega), complex(self.amplitude)
        return [om.real, om.imag, a.real, a.imag, self.kx, self.ky]

    @classmethod
    def from_list(cls, row: Sequence) -> "SynthMode":
        if len(row) != 6:
            raise BadSpec(f"mode spec needs 6 numbers (re_w, im_w, re_a, im_a, kx, ky), got {row!r}")
        re_w, im_w, re_a, im_a, kx, ky = row
        if int(kx) != kx or int(ky) != ky:
            raise BadSpec(f"wavenumbers must be integers, got {kx}, {ky}")
        return cls(complex(re_w, im_w), complex(re_a, im_a), int(kx), int(ky))


DEFAULT_MODES = (
    SynthMode(complex(-0.02, 2.0), 1.0, kx=1, ky=0),
    SynthMode(complex(-0.05, 3.3), complex(0.4, 0.3), kx=2, ky=1),
)

# Two travelling waves plus the standing wave 1.2 cos(2 pi (x + y)) Re(exp(omega t)),
# built from a +k / -k pair sharing one omega. A standing wave has a single
# real spatial shape, so a linear operator on the snapshots cannot advance
# its phase; exact DMD is ill-conditioned on this field in rollout.
STANDING_MODES = DEFAULT_MODES + (
    SynthMode(complex(-0.01, 1.2), 0.6, kx=1, ky=1),
    SynthMode(complex(-0.01, 1.2), 0.6, kx=-1, ky=-1),
)


def grid(nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre coordinates on the unit square; pooling keeps grids nested."""
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    return x, y


def synth_generate(
    modes: Sequence[SynthMode],
    nx: int,
    ny: int,
    nt: int,
    dt: float,
    seed: int = 0,
    eps: float = 0.0,
    noise: float = 0.0,
) -> FieldSeries:
    """``Re(sum_j a_j phi_j(x, y) exp(omega_j t)) + eps * (linear part)**2``.

    ``noise`` adds seeded i.i.d. Gaussian noise of that standard deviation;
    it is zero by default so the linear field has an exactly known spectrum.
    """
    if len(modes) == 0:
        raise BadSpec("need at least one mode")
    if min(nx, ny, nt) < 1 or not dt > 0:
        raise BadSpec(f"bad grid {nx}x{ny}x{nt} / dt={dt}")
    if not (np.isfinite(eps) and np.isfinite(noise) and noise >= 0):
        raise BadSpec(f"bad eps/noise: {eps}, {noise}")
    x, y = grid(nx, ny)
    t = np.arange(nt) * dt
    lin = np.zeros((nx, ny, nt), dtype=np.complex128)
    # overflow is reported below as BadSpec, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for mode in modes:
            if not (np.isfinite(complex(mode.omega)) and np.isfinite(complex(mode.amplitude))):
                raise BadSpec(f"non-finite mode {mode}")
            px = np.exp(2j * np.pi * mode.kx * x)
            py = np.exp(2j * np.pi * mode.ky * y)
            lin += complex(mode.amplitude) * np.einsum("i,j,k->ijk", px, py, np.exp(complex(mode.omega) * t))
        u = lin.real
        if eps:
            u = u + eps * u**2
    if noise:
        u = u + np.random.default_rng(seed).normal(scale=noise, size=u.shape)
    if not np.all(np.isfinite(u)):
        raise BadSpec("mode growth overflows over the requested horizon")
    return FieldSeries(u, dt)


def generator_eigenvalues(modes: Sequence[SynthMode], dt: float) -> np.ndarray:
    out = []
    for mode in modes:
        out.extend(mode.discrete_eigenvalues(dt))
    return np.asarray(out, dtype=np.complex128)


# -- container I/O ------------------------------------------------------------

def save_field(f: FieldSeries, path) -> None:
    """Write the ``FLD1`` container: header, then little-endian f32 values in (x, y, t) order."""
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, f.nx, f.ny, f.nt, float(f.dt))
    payload = np.ascontiguousarray(f.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_field(path) -> FieldSeries:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _FIELD_HEADER.size or raw[:4] != FIELD_MAGIC:
        raise BadMagic(f"{path} is not a FLD1 field container")
    magic, version, nx, ny, nt, dt = _FIELD_HEADER.unpack_from(raw)
    if version != FIELD_VERSION:
        raise VersionMismatch(f"{path}: container version {version}, expected {FIELD_VERSION}")
    count = nx * ny * nt
    payload = raw[_FIELD_HEADER.size:]
    if len(payload) != 4 * count:
        raise IoError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(nx, ny, nt).astype(np.float64)
    return FieldSeries(values, dt)


def read_csv_snapshot(path) -> np.ndarray:
    """One snapshot: a row per x, a column per y, optional header row."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise IoError(f"{path}: no numeric rows")
    try:
        arr = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise IoError(f"{path}: {exc}") from exc
    return arr


def load_csv_snapshots(paths: Sequence, dt: float = 1.0) -> FieldSeries:
    snaps = [read_csv_snapshot(p) for p in paths]
    shapes = {s.shape for s in snaps}
    if len(shapes) != 1:
        raise IoError(f"snapshot files disagree on shape: {sorted(shapes)}")
    return FieldSeries(np.stack(snaps, axis=-1), dt)


def write_csv_snapshot(values: np.ndarray, path, header: bool = False) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"y{j}" for j in range(values.shape[1])])
        for row in values:
            w.writerow([repr(float(v)) for v in row])
