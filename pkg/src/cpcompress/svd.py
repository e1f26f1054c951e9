"""Truncated SVD for fully connected weight matrices.

A weight matrix W (out x in) is factorized as W = U diag(s) V^T and cut at
rank R; the singular values are folded into the left factor immediately, so
only two matrices (UD, V^T) survive.  Applying V^T then UD in sequence is
the two-layer replacement for the original matrix.

The factorization itself is a one-sided Jacobi orthogonalization of the
thinner side: deterministic, dependency-free, and accurate at the matrix
sizes this package handles.
"""

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .tensor import _frozen

__all__ = ["SvdFactors", "truncated_svd", "split_fc", "singular_values"]

_JACOBI_TOL = 1e-13
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdFactors:
    """Rank-R pair (UD, V^T) with UD of shape (M, R) and V^T of shape (R, N)."""

    ud: np.ndarray
    vt: np.ndarray

    def __post_init__(self):
        ud = _frozen(self.ud)
        vt = _frozen(self.vt)
        if ud.ndim != 2 or vt.ndim != 2:
            raise ValueError("factors must be matrices")
        if ud.shape[1] != vt.shape[0]:
            raise ValueError(
                f"rank mismatch: ud has {ud.shape[1]} columns, vt has "
                f"{vt.shape[0]} rows"
            )
        object.__setattr__(self, "ud", ud)
        object.__setattr__(self, "vt", vt)

    @property
    def rank(self) -> int:
        return self.ud.shape[1]

    @property
    def out_features(self) -> int:
        return self.ud.shape[0]

    @property
    def in_features(self) -> int:
        return self.vt.shape[1]

    @property
    def param_count(self) -> int:
        return self.ud.size + self.vt.size


def _jacobi_orthogonalize(a: np.ndarray, tol: float = _JACOBI_TOL):
    """Rotate column pairs of `a` (m >= n) until all are mutually orthogonal.

    Returns (a, v) with a = original @ v, columns of a orthogonal and v
    orthonormal.  Cyclic sweeps over pairs; each rotation zeroes one inner
    product exactly, and the process converges quadratically.
    """
    n = a.shape[1]
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                x = a[:, p]
                y = a[:, q]
                alpha = float(x @ x)
                beta = float(y @ y)
                gamma = float(x @ y)
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + sqrt(1.0 + zeta * zeta))
                if t == 0.0:  # sign(0) is 0; rotate by 45 degrees instead
                    t = 1.0
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * x - s * y, s * x + c * y
                vx = v[:, p].copy()
                vy = v[:, q].copy()
                v[:, p] = c * vx - s * vy
                v[:, q] = s * vx + c * vy
                rotated = True
        if not rotated:
            return a, v
    raise ArithmeticError("Jacobi sweep limit reached without convergence")


def _full_svd(w: np.ndarray):
    """Full SVD (U, s, V^T) with s sorted descending, via one-sided Jacobi."""
    m, n = w.shape
    if m >= n:
        a, v = _jacobi_orthogonalize(w.astype(np.float64).copy())
        norms = np.linalg.norm(a, axis=0)
        order = np.argsort(-norms, kind="stable")
        s = norms[order]
        u = a[:, order]
        nonzero = s > 0.0
        u[:, nonzero] = u[:, nonzero] / s[nonzero]
        return u, s, v[:, order].T
    # Work on the transpose so the thin side carries the rotations.
    u_t, s, vt_t = _full_svd(w.T)
    return vt_t.T, s, u_t.T


def singular_values(w) -> np.ndarray:
    """All singular values of `w`, non-increasing, all >= 0."""
    w = _as_matrix(w)
    _, s, _ = _full_svd(w)
    return s


def _as_matrix(w) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got {arr.ndim}-D input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    return arr


def truncated_svd(w, rank: int) -> SvdFactors:
    """Best rank-R approximation factors of `w` (Eckart-Young optimal).

    The reconstruction ud @ vt keeps the top R singular triplets; the
    dropped error is sqrt(sum of discarded squared singular values).
    """
    arr = _as_matrix(w)
    m, n = arr.shape
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {rank}")

    u, s, vt = _full_svd(arr)
    # Left vectors for meaningful singular values must come out orthonormal;
    # anything below the noise floor contributes nothing to ud anyway.
    if s[0] > 0.0:
        live = s > 1e-12 * s[0]
        gram = u[:, live].T @ u[:, live]
        if not np.allclose(gram, np.eye(int(live.sum())), atol=1e-8):
            raise ArithmeticError("left singular vectors lost orthonormality")

    ud = u[:, :rank] * s[:rank]
    return SvdFactors(ud, vt[:rank, :])


def split_fc(w, rank: int):
    """Split a weight matrix into the (M x R, R x N) two-layer pair."""
    factors = truncated_svd(w, rank)
    return factors.ud, factors.vt
