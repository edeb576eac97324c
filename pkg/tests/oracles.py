"""Slow, obviously-correct reference implementations used only by tests."""
from __future__ import annotations

import numpy as np


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """One-sided (Hestenes) Jacobi SVD of a real m x n matrix, m >= n.

    Orthogonalizes the columns of ``a`` pairwise with plane rotations; the
    column norms are then the singular values. Returns ``(u, s, vt)`` with
    ``s`` sorted descending.
    """
    u = np.array(a, dtype=np.float64, copy=True)
    m, n = u.shape
    assert m >= n
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off < tol:
            break
    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma)
    sigma = sigma[order]
    v = v[:, order]
    u = u[:, order] / np.where(sigma > 0, sigma, 1.0)
    return u, sigma, v.T


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(m):
            acc = 0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "linear") -> np.ndarray:
    """Zero-padded 'same' correlation over a (space, time, chan) tensor.

    ``w`` is (kh, kw, cin, cout) with kh taps along time and kw along space.
    """
    n_space, n_time, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n_space, n_time, cout))
    for s in range(n_space):
        for t in range(n_time):
            for co in range(cout):
                acc = b[co]
                for a in range(kh):
                    for bb in range(kw):
                        ss, tt = s + bb - pw, t + a - ph
                        if 0 <= ss < n_space and 0 <= tt < n_time:
                            for ci in range(cin):
                                acc += w[a, bb, ci, co] * x[ss, tt, ci]
                out[s, t, co] = acc
    if activation == "relu":
        out = np.maximum(out, 0.0)
    return out


def loop_mse(pred: np.ndarray, target: np.ndarray) -> float:
    total = 0.0
    flat_p, flat_t = pred.ravel(), target.ravel()
    for p, t in zip(flat_p, flat_t):
        total += (float(p) - float(t)) ** 2
    return total / flat_p.size


def central_difference(f, x: np.ndarray, index: tuple, step: float = 1e-5) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    orig = x[index]
    x[index] = orig + step
    fp = f()
    x[index] = orig - step
    fm = f()
    x[index] = orig
    return (fp - fm) / (2.0 * step)


def random_indices(shape: tuple, count: int, rng: np.random.Generator) -> list[tuple]:
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
