"""Layerwise proxy Hessian ``H = (2/n) * sum_t x_t x_t^T``, accumulated in float64."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, EmptyCalibration, NonFinite


@dataclass
class HessianAccumulator:
    name: str
    dim: int
    sum_xx: np.ndarray = field(default=None)
    sample_count: int = 0

    def __post_init__(self):
        if self.sum_xx is None:
            self.sum_xx = np.zeros((self.dim, self.dim))

    def update(self, x_batch) -> "HessianAccumulator":
        return hessian_update(self, x_batch)

    def merge(self, other: "HessianAccumulator") -> "HessianAccumulator":
        if other.dim != self.dim:
            raise DimMismatch(f"{self.name}: cannot merge dim {other.dim} into {self.dim}")
        self.sum_xx = self.sum_xx + other.sum_xx
        self.sample_count += other.sample_count
        return self


def hessian_update(acc: HessianAccumulator, x_batch) -> HessianAccumulator:
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != acc.dim:
        raise DimMismatch(f"{acc.name}: batch shape {x.shape} does not match input dim {acc.dim}")
    if x.shape[0] == 0:
        return acc
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{acc.name}: calibration batch contains NaN or Inf")
    s = acc.sum_xx + x.T @ x
    acc.sum_xx = 0.5 * (s + s.T)
    acc.sample_count += x.shape[0]
    return acc


def hessian_finalize(acc: HessianAccumulator) -> np.ndarray:
    # no damping here: a ridge shift would erase the null space
    if acc.sample_count == 0:
        raise EmptyCalibration(f"{acc.name}: no calibration samples")
    return (2.0 / acc.sample_count) * acc.sum_xx


def accumulate(batches, names, dims) -> dict[str, HessianAccumulator]:
    """Feed an iterable of ``{name: X}`` captures into one accumulator per layer."""
    accs = {name: HessianAccumulator(name, dims[name]) for name in names}
    for cap in batches:
        for name in names:
            hessian_update(accs[name], cap[name])
    return accs
