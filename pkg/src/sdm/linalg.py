"""Symmetric positive-definite matrix helpers.

All covariance algebra in the package goes through these routines so that
every returned matrix is explicitly symmetrized and every solve uses a
Cholesky factorization instead of a general-purpose inverse.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError, ShapeError

# Relative eigenvalue floor below which a covariance is treated as degenerate.
DEGENERACY_FLOOR = 1e-10
# Condition-number guard applied before any solve.
MAX_CONDITION = 1e12


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (m + m.T) / 2."""
    return (m + m.T) / 2.0


def check_spd(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate that ``m`` is square, symmetric, and positive-definite.

    Definiteness is judged relative to scale: the smallest eigenvalue must
    exceed ``DEGENERACY_FLOOR`` times the largest. Degenerate matrices are
    rejected rather than silently regularized.

    Returns the symmetrized copy.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    sym = symmetrize(m)
    eigs = np.linalg.eigvalsh(sym)
    lo, hi = eigs[0], eigs[-1]
    if hi <= 0.0 or lo <= DEGENERACY_FLOOR * hi:
        raise NumericalError(
            f"{name} is not positive-definite (eigenvalue range [{lo:.3e}, {hi:.3e}])"
        )
    return sym


def _guard_condition(m: np.ndarray, name: str) -> None:
    eigs = np.linalg.eigvalsh(m)
    lo, hi = eigs[0], eigs[-1]
    if lo <= 0.0 or hi / lo > MAX_CONDITION:
        raise NumericalError(
            f"{name}: precision matrix condition number exceeds {MAX_CONDITION:.0e} "
            f"(eigenvalue range [{lo:.3e}, {hi:.3e}])"
        )


def spd_solve(m: np.ndarray, b: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Solve ``m @ x = b`` for symmetric positive-definite ``m`` via Cholesky."""
    sym = symmetrize(np.asarray(m, dtype=float))
    _guard_condition(sym, name)
    try:
        factor = cho_factor(sym, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise NumericalError(f"{name}: Cholesky factorization failed") from exc
    return cho_solve(factor, np.asarray(b, dtype=float), check_finite=False)


def spd_inverse(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Invert a symmetric positive-definite matrix, returning a symmetric result."""
    inv = spd_solve(m, np.eye(m.shape[0]), name=name)
    return symmetrize(inv)


def quad_form(x: np.ndarray, m: np.ndarray) -> float:
    """Return ``x.T @ m @ x`` as a float."""
    x = np.asarray(x, dtype=float)
    return float(x @ m @ x)


def floor_eigenvalues(m: np.ndarray, floor: float) -> np.ndarray:
    """Clip the eigenvalues of a symmetric matrix at ``floor`` from below."""
    sym = symmetrize(np.asarray(m, dtype=float))
    eigs, vecs = np.linalg.eigh(sym)
    if eigs[0] >= floor:
        return sym
    clipped = np.maximum(eigs, floor)
    return symmetrize((vecs * clipped) @ vecs.T)
