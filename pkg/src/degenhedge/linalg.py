"""Rank-revealing linear algebra used throughout the engine.

Everything here is built on the SVD so that behaviour near rank
transitions is stable: singular values inside the threshold band are
truncated to zero deterministically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NonFinite

DEFAULT_RANK_TOL = 1e-10


def _check_finite(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} contains NaN/Inf")
    return a


@dataclass(frozen=True)
class Projection:
    """Orthogonal projector onto range(sigma^T), with rank metadata."""

    matrix: np.ndarray  # (d, d), symmetric idempotent
    rank: int
    tol: float
    source_sigma_hash: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _sigma_hash(sigma: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(sigma).tobytes()).hexdigest()[:16]


def pseudoinverse(a: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff.

    Singular values below tol * s_max are treated as exactly zero.
    """
    a = _check_finite(a, "matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > tol * s[0]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * s_inv) @ u.T


def range_projection(sigma: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> Projection:
    """Orthogonal projector onto range(sigma^T) in R^d.

    For sigma (n x d) the right singular vectors with non-negligible
    singular value span range(sigma^T); P = V_r V_r^T.
    """
    sigma = _check_finite(sigma, "sigma")
    if sigma.ndim != 2:
        raise ValueError("sigma must be 2-D")
    d = sigma.shape[1]
    _, s, vt = np.linalg.svd(sigma, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
        p = np.zeros((d, d))
    else:
        keep = s > tol * s[0]
        rank = int(np.count_nonzero(keep))
        vr = vt[keep]
        p = vr.T @ vr
    p = 0.5 * (p + p.T)  # enforce exact symmetry
    return Projection(matrix=p, rank=rank, tol=tol, source_sigma_hash=_sigma_hash(sigma))


def min_norm_solve(
    a: np.ndarray, rhs: np.ndarray, tol: float = DEFAULT_RANK_TOL
) -> tuple[np.ndarray, float]:
    """Minimal-norm least-squares solution of A x = rhs.

    Returns (x, residual_norm). x is the unique least-squares solution
    lying in range(A^T).
    """
    a = _check_finite(a, "matrix")
    rhs = _check_finite(rhs, "rhs")
    x = pseudoinverse(a, tol) @ rhs
    residual = float(np.linalg.norm(a @ x - rhs))
    return x, residual


def batch_min_norm_solve(a: np.ndarray, rhs: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Vectorized minimal-norm solve for a stack of small systems.

    a: (N, m, k), rhs: (N, m) -> x: (N, k). Uses batched SVD; the 1x1
    case is special-cased since it dominates single-asset runs.
    """
    a = np.asarray(a, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if a.shape[1] == 1 and a.shape[2] == 1:
        av = a[:, 0, 0]
        x = np.zeros_like(av)
        nz = np.abs(av) > 0.0
        x[nz] = rhs[nz, 0] / av[nz]
        return x[:, None]
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    smax = s[:, :1]
    keep = s > tol * np.where(smax > 0.0, smax, 1.0)
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    # x = V diag(s_inv) U^T rhs
    utr = np.einsum("nmr,nm->nr", u, rhs)
    return np.einsum("nrk,nr->nk", vt, s_inv * utr)
