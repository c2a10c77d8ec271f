"""Dense linear algebra used throughout: Jacobi eigensolver, SPD solves,
small singular value problems and a seeded counter-based RNG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

from . import _backend
from .errors import DimMismatch, NoConvergence, NonFinite, NotPositiveDefinite

JACOBI_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs sorted by non-decreasing ``|value|``; column i of
    ``vectors`` belongs to ``values[i]``."""

    values: np.ndarray
    vectors: np.ndarray
    sweeps: int = 0


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Copy ``x`` into a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.array(x, dtype=np.float64, order="C", copy=True)
    if m.ndim != 2:
        raise DimMismatch(f"{name}: expected 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{name}: contains NaN or Inf")
    return m


def symmetrize(h: np.ndarray) -> np.ndarray:
    return 0.5 * (h + h.T)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties go to the lowest row index (``argmax`` returns the first hit).
    """
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[idx, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return vectors * signs


def eigh_symmetric(h, *, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    The input is symmetrized by averaging before rotating. Iteration stops
    once the largest off-diagonal magnitude is at most ``1e-12 * ||h||_F``.
    """
    a = symmetrize(as_matrix(h, "h"))
    n, cols = a.shape
    if n != cols:
        raise DimMismatch(f"eigh_symmetric: matrix must be square, got {a.shape}")
    v = np.eye(n)
    tol = JACOBI_REL_TOL * float(np.linalg.norm(a))
    sweeps = _backend.jacobi_sweeps(a, v, tol, max_sweeps)
    if sweeps < 0:
        raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (n={n})")
    values = np.diag(a).copy()
    order = np.argsort(np.abs(values), kind="stable")
    return EigenDecomposition(values[order], fix_signs(v[:, order]), sweeps)


def cholesky_factor(a) -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefinite on a non-positive pivot."""
    a = np.asarray(a, dtype=np.float64)
    try:
        return cholesky(a, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    except ValueError as exc:
        raise NonFinite(str(exc)) from None


def cholesky_solve(a, rhs) -> np.ndarray:
    """Solve ``a @ x = rhs`` for symmetric positive definite ``a``."""
    a = as_matrix(a, "a")
    rhs = np.asarray(rhs, dtype=np.float64)
    if a.shape[0] != a.shape[1] or a.shape[0] != rhs.shape[0]:
        raise DimMismatch(f"cholesky_solve: a {a.shape} vs rhs {rhs.shape}")
    low = cholesky_factor(a)
    return cho_solve((low, True), rhs)


def cholesky_solve_batched(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a stack of SPD systems ``a[i] @ x[i] = rhs[i]``."""
    if a.ndim != 3 or rhs.ndim != 2 or a.shape[:2] != rhs.shape or a.shape[1] != a.shape[2]:
        raise DimMismatch(f"cholesky_solve_batched: a {a.shape} vs rhs {rhs.shape}")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    y = np.linalg.solve(low, rhs[..., None])
    return np.linalg.solve(np.swapaxes(low, 1, 2), y)[..., 0]


def singular_values_small(m) -> np.ndarray:
    """Singular values, largest first, from the smaller Gram matrix."""
    m = as_matrix(m, "m")
    if min(m.shape) > 256:
        raise DimMismatch(f"singular_values_small: min dimension {min(m.shape)} > 256")
    if min(m.shape) == 0:
        return np.zeros(0)
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    lam = eigh_symmetric(gram).values
    return np.sort(np.sqrt(np.clip(lam, 0.0, None)))[::-1]


class Rng:
    """Seeded Philox stream; identical output for a given seed on every platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, derived deterministically from ``key``."""
        return Rng((self.seed * 1_000_003 + int(key)) % (1 << 63))


def rng_normal(rng: Rng, n: int) -> np.ndarray:
    return rng.normal(int(n))
