"""Dense linear-algebra helpers with fixed, documented tolerances."""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import NumericalError

PINV_RTOL = 1e-10
RANK_RTOL = 1e-8
SOLVE_RESIDUAL_TOL = 1e-8


def pinv(a: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse; singular values below ``rtol * s_max`` are zeroed."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros(a.shape[::-1])
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(a.shape[::-1])
    keep = s > rtol * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def singular_values(a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros(0)
    return np.linalg.svd(a, compute_uv=False)


def numerical_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = singular_values(a)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def sigma_min(a: np.ndarray) -> float:
    """Smallest singular value over min(rows, cols) (zero for empty input)."""
    s = singular_values(a)
    return float(s[-1]) if s.size else 0.0


def solve_checked(a, b, tol: float = SOLVE_RESIDUAL_TOL) -> np.ndarray:
    """Solve ``a x = b`` by partial-pivot LU and verify the relative residual.

    Sparse ``a`` goes through SuperLU instead of a dense factorization.
    """
    b = np.asarray(b, dtype=float)
    if scipy.sparse.issparse(a):
        x = scipy.sparse.linalg.spsolve(a.tocsc(), b)
        resid = a @ x - b
    else:
        a = np.asarray(a, dtype=float)
        with np.errstate(all="ignore"):
            lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
            x = scipy.linalg.lu_solve((lu, piv), b)
        resid = a @ x - b
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    err = float(np.max(np.abs(resid))) / scale if resid.size else 0.0
    if not np.all(np.isfinite(x)) or err > tol:
        raise NumericalError(f"linear solve residual {err:.3e} exceeds {tol:.1e}")
    return x


def generalized_rayleigh_sup(num: np.ndarray, den: np.ndarray, rtol: float = RANK_RTOL) -> float:
    """``sup x'num x / x'den x`` over x with ``x'den x != 0``, for PSD matrices.

    The denominator's kernel is projected out first. If ``num`` acts on that
    kernel the quotient is unbounded and ``inf`` is returned.
    """
    num = 0.5 * (np.asarray(num, float) + np.asarray(num, float).T)
    den = 0.5 * (np.asarray(den, float) + np.asarray(den, float).T)
    evals, evecs = np.linalg.eigh(den)
    top = float(evals[-1]) if evals.size else 0.0
    if top <= 0.0:
        return float("inf") if np.any(np.abs(num) > 0) else 0.0
    keep = evals > rtol * top
    basis, kernel = evecs[:, keep], evecs[:, ~keep]
    if kernel.shape[1]:
        leak = np.linalg.norm(num @ kernel, 2)
        if leak > rtol * max(1.0, np.linalg.norm(num, 2)):
            return float("inf")
    whiten = basis / np.sqrt(evals[keep])
    reduced = whiten.T @ num @ whiten
    return float(max(np.linalg.eigvalsh(0.5 * (reduced + reduced.T))[-1], 0.0))
