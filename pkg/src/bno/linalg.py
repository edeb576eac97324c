"""Dense matrix kernels used by the DMD pipeline.

Everything here is float64/complex128 and backed by LAPACK through numpy.
The wrappers exist to pin down the contracts the DMD code relies on:
rank truncation with a relative cutoff, eigen-residual checks and
explicit error types instead of silent NaNs.

Tall matrices (the snapshot matrices of large grids) are factored through a
blocked tall-skinny QR first. Each row block fits in cache, so the cost
stays linear in the row count where one LAPACK call on the whole matrix
slows down once it spills out of cache.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceFailure,
    DimMismatch,
    EmptyMatrix,
    NonFinite,
    NotSquare,
)

DEFAULT_REL_CUTOFF = 1e-10
EIG_SIZE_CAP = 128
EIG_RESIDUAL_TOL = 1e-8
TSQR_BLOCK = 4096  # rows per block; 4096 x 20 doubles is well inside L2


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    effective_rank: int

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _as_matrix(a, name: str = "a") -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise EmptyMatrix(f"{name} has shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} contains NaN or Inf")
    if np.iscomplexobj(a):
        return a.astype(np.complex128, copy=False)
    return a.astype(np.float64, copy=False)


def tsqr(a: np.ndarray, block: int = TSQR_BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR of a tall matrix by QR of row blocks, then QR of the stacked R factors."""
    n_rows = a.shape[0]
    if n_rows <= block:
        return np.linalg.qr(a)
    qs, rs = [], []
    for start in range(0, n_rows, block):
        q, r = np.linalg.qr(a[start:start + block])
        qs.append(q)
        rs.append(r)
    q2, r = tsqr(np.vstack(rs), block)
    out = np.empty((n_rows, q2.shape[1]), dtype=np.result_type(a, q2))
    row = col = 0
    for q in qs:
        k = q.shape[1]
        out[row:row + q.shape[0]] = q @ q2[col:col + k]
        row += q.shape[0]
        col += k
    return out, r


def _thin_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        if a.shape[0] > TSQR_BLOCK and a.shape[1] * 2 <= TSQR_BLOCK:
            q, r = tsqr(a)
            u, s, vt = np.linalg.svd(r)
            return q @ u, s, vt
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc


def svd_truncated(a, r: int, rel_cutoff: float = DEFAULT_REL_CUTOFF) -> SvdResult:
    """Top singular triplets of ``a``.

    Keeps ``min(r, effective_rank)`` triplets, where the effective rank counts
    singular values ``>= rel_cutoff * sigma[0]``. An all-zero matrix has
    effective rank 0 and yields empty factors.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    a = _as_matrix(a)
    u, s, vt = _thin_svd(a)
    if s[0] <= 0.0:
        eff = 0
    else:
        eff = int(np.count_nonzero(s >= rel_cutoff * s[0]))
    keep = min(r, eff)
    return SvdResult(u[:, :keep], s[:keep], vt[:keep, :], eff)


def eig_dense(a, size_cap: int = EIG_SIZE_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and unit-norm eigenvectors of a small square matrix.

    Raises ConvergenceFailure when LAPACK does not converge or the residual
    ``||A W - W diag(lam)||_F`` exceeds ``1e-8 ||A||_F``.
    """
    a = _as_matrix(a)
    n, m = a.shape
    if n != m:
        raise NotSquare(f"expected a square matrix, got {a.shape}")
    if n > size_cap:
        raise DimMismatch(f"eig_dense is meant for reduced operators (<= {size_cap}), got {n}")
    try:
        lam, w = np.linalg.eig(a)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    w = w.astype(np.complex128, copy=False)
    lam = lam.astype(np.complex128, copy=False)
    w = w / np.linalg.norm(w, axis=0, keepdims=True)
    norm_a = np.linalg.norm(a)
    resid = np.linalg.norm(a @ w - w * lam)
    if not np.isfinite(resid) or resid > EIG_RESIDUAL_TOL * norm_a:
        raise ConvergenceFailure(
            f"eigen-residual {resid:.3e} exceeds {EIG_RESIDUAL_TOL:g} * ||A|| = {norm_a:.3e}"
        )
    return lam, w


def pinv(a, rel_cutoff: float = DEFAULT_REL_CUTOFF) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with a relative singular-value cutoff."""
    a = _as_matrix(a)
    u, s, vh = _thin_svd(a)
    if s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]), dtype=a.dtype)
    keep = s >= rel_cutoff * s[0]
    u, s, vh = u[:, keep], s[keep], vh[keep, :]
    return (vh.conj().T / s) @ u.conj().T


def conj_transpose(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimMismatch(f"expected 2-D, got shape {a.shape}")
    return a.conj().T


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def matvec(a, x) -> np.ndarray:
    a, x = np.asarray(a), np.asarray(x)
    if a.ndim != 2 or x.ndim != 1:
        raise DimMismatch(f"matvec needs (2-D, 1-D), got {a.shape} and {x.shape}")
    if a.shape[1] != x.shape[0]:
        raise DimMismatch(f"inner dimensions differ: {a.shape} @ {x.shape}")
    return a @ x
