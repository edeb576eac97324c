"""Exact dynamic mode decomposition and the Koopman discrete operator.

The fit follows the classical exact-DMD recipe on a snapshot matrix
``[u_1, ..., u_M]``:

    Y  = [u_1 .. u_{M-1}],  Y' = [u_2 .. u_M]
    Y  ~ U S V*                      (rank-r truncation)
    A~ = U* Y' V S^-1,  A~ W = W L
    Phi = Y' V S^-1 W,  omega = log(lam) / dt,  b = pinv(Phi) u_1

and the forecast at time ``t`` (measured from ``u_1``) is
``Re(Phi exp(Omega t) b)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateData, NonFinite, RankTooLarge

log = logging.getLogger(__name__)

IMAG_RESIDUE_TOL = 1e-6


@dataclass(frozen=True)
class SnapshotMatrix:
    """Columns are snapshots of a real field flattened to ``n_space`` points."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"snapshot matrix must be 2-D, got {v.shape}")
        if v.shape[1] < 2:
            raise ValueError("need at least two snapshots")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("snapshot matrix contains NaN or Inf")
        object.__setattr__(self, "values", v)

    @property
    def n_space(self) -> int:
        return self.values.shape[0]

    @property
    def n_time(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DmdModel:
    modes: np.ndarray  # (n_space, rank) complex
    eig_discrete: np.ndarray  # lambda
    eig_continuous: np.ndarray  # omega = log(lambda) / dt
    amplitudes: np.ndarray  # b
    dt: float
    requested_rank: int
    singular_values: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.eig_discrete.shape[0]

    @property
    def rank_reduced(self) -> bool:
        return self.rank < self.requested_rank

    def dynamics(self, eval_times) -> np.ndarray:
        """``exp(omega t) * b`` for every mode and time, shape (rank, n_times)."""
        t = np.asarray(eval_times, dtype=np.float64)
        with np.errstate(invalid="ignore", over="ignore"):
            growth = np.exp(np.outer(self.eig_continuous, t))
        # lambda == 0 gives omega = -inf; the mode only lives at t = 0.
        dead = np.isneginf(self.eig_continuous.real)
        if np.any(dead):
            growth[dead, :] = np.where(t == 0.0, 1.0, 0.0)
        return growth * self.amplitudes[:, None]


@dataclass(frozen=True)
class KoopmanOutput:
    values: np.ndarray  # (n_space, n_eval_times) real
    eval_times: np.ndarray
    imag_residue: float = 0.0
    imbalanced: bool = False


def dmd_fit(snapshots: SnapshotMatrix, r: int, rel_cutoff: float = linalg.DEFAULT_REL_CUTOFF) -> DmdModel:
    if snapshots.n_time < 3:
        raise ValueError(f"dmd_fit needs at least 3 snapshots, got {snapshots.n_time}")
    if r < 1 or r > snapshots.n_time - 1:
        raise RankTooLarge(f"rank {r} outside [1, {snapshots.n_time - 1}] for {snapshots.n_time} snapshots")
    data = snapshots.values
    y, y_next = data[:, :-1], data[:, 1:]

    svd = linalg.svd_truncated(y, r, rel_cutoff)
    if svd.rank == 0:
        raise DegenerateData("snapshot matrix has numerical rank 0")
    if svd.rank < r:
        log.debug("DMD rank reduced from %d to %d (effective rank)", r, svd.rank)

    v_sinv = svd.vt.conj().T / svd.sigma  # V S^-1
    y_v_sinv = y_next @ v_sinv
    a_tilde = svd.u.conj().T @ y_v_sinv
    lam, w = linalg.eig_dense(a_tilde)
    modes = y_v_sinv @ w
    with np.errstate(divide="ignore"):
        omega = np.log(lam) / snapshots.dt
    b = linalg.pinv(modes, rel_cutoff) @ data[:, 0]
    return DmdModel(
        modes=modes,
        eig_discrete=lam,
        eig_continuous=omega,
        amplitudes=b,
        dt=snapshots.dt,
        requested_rank=r,
        singular_values=svd.sigma,
    )


def dmd_reconstruct(model: DmdModel, eval_times) -> KoopmanOutput:
    t = np.atleast_1d(np.asarray(eval_times, dtype=np.float64))
    if not np.all(np.isfinite(t)):
        raise NonFinite("eval_times must be finite")
    full = model.modes @ model.dynamics(t)
    values = full.real
    if not np.all(np.isfinite(values)):
        raise NonFinite("DMD reconstruction overflowed")
    residue = float(np.max(np.abs(full.imag))) if full.size else 0.0
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    imbalanced = residue > IMAG_RESIDUE_TOL * scale
    if imbalanced:
        log.debug("imbalanced spectrum: imaginary residue %.3e vs scale %.3e", residue, scale)
    return KoopmanOutput(values=values, eval_times=t, imag_residue=residue, imbalanced=imbalanced)


def koopman_apply(
    sequence: SnapshotMatrix,
    r: int,
    horizon_steps: int = 0,
    rel_cutoff: float = linalg.DEFAULT_REL_CUTOFF,
) -> KoopmanOutput:
    """Fit DMD on ``sequence`` and return the same-length window shifted by ``horizon_steps``."""
    if horizon_steps < 0:
        raise ValueError(f"horizon_steps must be >= 0, got {horizon_steps}")
    model = dmd_fit(sequence, r, rel_cutoff)
    times = (np.arange(sequence.n_time) + horizon_steps) * sequence.dt
    return dmd_reconstruct(model, times)
