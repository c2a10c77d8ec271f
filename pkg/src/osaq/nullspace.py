"""Tail-energy null space of a layer Hessian and its stability across calibrations."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimMismatch, EmptyNullSpace, EmptySpectrum
from .linalg import eigh_symmetric, singular_values_small

DEFAULT_GAMMA = 1e-4


class KRule(str, enum.Enum):
    STAY_BELOW = "stay-below"
    FIRST_REACH = "first-reach"

    @classmethod
    def parse(cls, value) -> "KRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            raise ConfigError(f"unknown k-rule {value!r}; use stay-below or first-reach") from None


@dataclass(frozen=True)
class NullSpaceBasis:
    basis: np.ndarray  # (K, N), orthonormal rows
    eigenvalues: np.ndarray  # signed, sorted by |value|
    gamma: float
    rule: KRule

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def abs_eigenvalues(self) -> np.ndarray:
        return np.abs(self.eigenvalues)


@dataclass(frozen=True)
class StabilityReport:
    layer: str
    singular_values: np.ndarray
    k1: int
    k2: int

    @property
    def max_singular_value(self) -> float:
        return float(self.singular_values[0]) if self.singular_values.size else 0.0


def select_k(abs_eigenvalues, gamma: float, rule=KRule.STAY_BELOW) -> int:
    """Null-space size from the prefix energy of ascending ``|lambda|``.

    stay-below: largest K whose prefix energy is at most ``gamma * total``
    (K may be 0). first-reach: smallest K >= 1 whose prefix energy reaches
    ``gamma * total``.
    """
    lam = np.asarray(abs_eigenvalues, dtype=np.float64)
    if lam.size == 0:
        raise EmptySpectrum("empty eigenvalue list")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    rule = KRule.parse(rule)
    prefix = np.cumsum(lam)
    threshold = gamma * prefix[-1]
    if rule is KRule.STAY_BELOW:
        return int(np.count_nonzero(prefix <= threshold))
    return int(np.argmax(prefix >= threshold)) + 1


def extract_nullspace(h, gamma: float = DEFAULT_GAMMA, rule=KRule.STAY_BELOW) -> NullSpaceBasis:
    rule = KRule.parse(rule)
    eig = eigh_symmetric(h)
    if eig.values.size == 0:
        raise EmptySpectrum("Hessian has no eigenvalues")
    k = select_k(np.abs(eig.values), gamma, rule)
    return NullSpaceBasis(eig.vectors[:, :k].T.copy(), eig.values, float(gamma), rule)


def stability(n1: NullSpaceBasis, n2: NullSpaceBasis, layer: str = "") -> StabilityReport:
    """Cosines of the principal angles between two null spaces."""
    if n1.dim != n2.dim:
        raise DimMismatch(f"ambient dimensions differ: {n1.dim} vs {n2.dim}")
    if n1.k == 0 or n2.k == 0:
        raise EmptyNullSpace(f"{layer or 'layer'}: null space is empty (K1={n1.k}, K2={n2.k})")
    sv = singular_values_small(n1.basis @ n2.basis.T)
    return StabilityReport(layer, sv, n1.k, n2.k)


def tail_energy_curve(abs_eigenvalues) -> list[tuple[int, float]]:
    """``(k, prefix_energy / total_energy)`` for k = 1..N.

    An all-zero spectrum has no energy to split; it is reported as the
    flat ramp k/N.
    """
    lam = np.abs(np.asarray(abs_eigenvalues, dtype=np.float64))
    if lam.size == 0:
        raise EmptySpectrum("empty eigenvalue list")
    prefix = np.cumsum(lam)
    total = prefix[-1]
    if total == 0.0:
        frac = np.arange(1, lam.size + 1) / lam.size
    else:
        frac = np.minimum(prefix / total, 1.0)
        frac[-1] = 1.0
    return [(k + 1, float(f)) for k, f in enumerate(frac)]
