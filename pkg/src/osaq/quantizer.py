"""Uniform affine weight quantization: round-to-nearest and column-compensated.

Parameters are computed per output channel, optionally split into groups of
``group_size`` consecutive input columns::

    s = (max - min) / (2^b - 1),   z = round(-min / s)
    code = clip(round(w / s) + z, 0, 2^b - 1),   w_hat = s * (code - z)

Rounding is half-to-even. A constant group has no range; it gets ``s = 1``,
``z = 0`` and a per-group ``offset`` so that it dequantizes to the constant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve

from . import _backend
from ._pykernels import group_params
from .errors import ConfigError, DimMismatch
from .linalg import cholesky_factor


class Backend(str, enum.Enum):
    RTN = "rtn"
    COMPENSATED = "compensated"

    @classmethod
    def parse(cls, value) -> "Backend":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown backend {value!r}; use rtn or compensated") from None


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int | None = None  # None: one group per output channel
    backend: Backend = Backend.RTN
    damping: float = 0.01
    rounding: str = "half-to-even"

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend.parse(self.backend))
        if not 2 <= int(self.bits) <= 8:
            raise ConfigError(f"bits must lie in [2, 8], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.damping < 0:
            raise ConfigError("damping must be >= 0")
        if self.rounding != "half-to-even":
            raise ConfigError("only half-to-even rounding is supported")

    @property
    def maxq(self) -> int:
        return (1 << int(self.bits)) - 1

    def groups_for(self, cols: int) -> int:
        gs = self.group_size or cols
        if cols % gs:
            raise ConfigError(f"group_size {gs} does not divide input dimension {cols}")
        return gs

    def to_dict(self) -> dict:
        return {
            "backend": self.backend.value,
            "bits": int(self.bits),
            "damping": self.damping,
            "group_size": self.group_size if self.group_size else "per-channel",
            "rounding": self.rounding,
        }


class QuantParams(NamedTuple):
    scale: float
    zero: float
    offset: float


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # (M, N) integers in [0, 2^b - 1]
    scales: np.ndarray  # (M, G)
    zeros: np.ndarray  # (M, G), integer valued
    offsets: np.ndarray  # (M, G), nonzero only for constant groups
    bits: int
    group_size: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        return np.repeat(per_group, self.group_size, axis=1)


def quant_params(w_group, bits: int) -> QuantParams:
    w = np.asarray(w_group, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise DimMismatch("quant_params needs a non-empty group")
    s, z, o = group_params(w, (1 << int(bits)) - 1)
    return QuantParams(float(s[0]), float(z[0]), float(o[0]))


def _codes(x, s, z, o, maxq):
    return np.clip(np.rint((x - o) / s) + z, 0.0, maxq)


def quantize_rtn(w, cfg: QuantConfig) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimMismatch(f"expected a 2-D weight, got shape {w.shape}")
    m, n = w.shape
    gs = cfg.groups_for(n)
    g = n // gs
    blocks = w.reshape(m * g, gs)
    s, z, o = group_params(blocks, cfg.maxq)
    codes = _codes(blocks, s[:, None], z[:, None], o[:, None], cfg.maxq)
    return QuantizedTensor(
        codes=codes.reshape(m, n).astype(np.uint8 if cfg.maxq <= 255 else np.int32),
        scales=s.reshape(m, g),
        zeros=z.reshape(m, g),
        offsets=o.reshape(m, g),
        bits=int(cfg.bits),
        group_size=gs,
    )


def damped_inverse_factor(h, damping: float) -> np.ndarray:
    """Upper Cholesky factor of ``(H + damping * mean(diag H) * I)^-1``."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    hd = h + damping * float(np.mean(np.diag(h))) * np.eye(n)
    low = cholesky_factor(hd)
    hinv = cho_solve((low, True), np.eye(n))
    hinv = 0.5 * (hinv + hinv.T)
    return np.ascontiguousarray(cholesky_factor(hinv).T)


def quantize_compensated(w, h, cfg: QuantConfig) -> QuantizedTensor:
    """Left-to-right column quantization with inverse-Hessian error feedback."""
    w = np.array(w, dtype=np.float64, order="C", copy=True)
    h = np.asarray(h, dtype=np.float64)
    if w.ndim != 2 or h.shape != (w.shape[1], w.shape[1]):
        raise DimMismatch(f"weights {w.shape} vs hessian {h.shape}")
    m, n = w.shape
    gs = cfg.groups_for(n)
    g = n // gs
    u = damped_inverse_factor(h, cfg.damping)
    scales = np.zeros((m, g))
    zeros = np.zeros((m, g))
    offsets = np.zeros((m, g))
    codes = np.zeros((m, n))
    _backend.compensate_columns(w, u, gs, cfg.maxq, scales, zeros, offsets, codes)
    return QuantizedTensor(
        codes=codes.astype(np.uint8 if cfg.maxq <= 255 else np.int32),
        scales=scales,
        zeros=zeros,
        offsets=offsets,
        bits=int(cfg.bits),
        group_size=gs,
    )


def quantize(w, cfg: QuantConfig, h=None) -> QuantizedTensor:
    if cfg.backend is Backend.COMPENSATED:
        if h is None:
            raise ConfigError("compensated backend needs a Hessian")
        return quantize_compensated(w, h, cfg)
    return quantize_rtn(w, cfg)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.codes.astype(np.float64)
    return q.expand(q.scales) * (codes - q.expand(q.zeros)) + q.expand(q.offsets)


def reconstruction_metrics(w_ref, q: QuantizedTensor, x_calib=None) -> dict:
    """Weight MSE, calibration output MSE and per-channel max-error stats."""
    w_ref = np.asarray(w_ref, dtype=np.float64)
    if w_ref.shape != q.shape:
        raise DimMismatch(f"reference {w_ref.shape} vs quantized {q.shape}")
    err = w_ref - dequantize(q)
    per_row = np.abs(err).max(axis=1)
    out = {
        "weight_mse": float(np.mean(err * err)),
        "channel_linf_max": float(per_row.max(initial=0.0)),
        "channel_linf_mean": float(per_row.mean()) if per_row.size else 0.0,
        "output_mse": 0.0,
    }
    if x_calib is not None:
        x = np.asarray(x_calib, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != w_ref.shape[1]:
            raise DimMismatch(f"calibration inputs {x.shape} vs weights {w_ref.shape}")
        if x.shape[0]:
            y = x @ err.T
            out["output_mse"] = float(np.sum(y * y) / x.shape[0])
    return out


def output_mse_from_hessian(err: np.ndarray, h: np.ndarray) -> float:
    """``||X E^T||_F^2 / n`` recovered from ``H = (2/n) X^T X``."""
    return float(0.5 * np.sum((err @ h) * err))


def to_tensors(name: str, q: QuantizedTensor) -> dict:
    p = f"q/{name}/"
    return {
        p + "codes": q.codes.astype(np.uint8),
        p + "scales": q.scales,
        p + "zeros": q.zeros.astype(np.int32),
        p + "offsets": q.offsets,
    }


def from_tensors(name: str, tensors, bits: int) -> QuantizedTensor:
    p = f"q/{name}/"
    codes = np.asarray(tensors[p + "codes"])
    scales = np.asarray(tensors[p + "scales"], dtype=np.float64)
    return QuantizedTensor(
        codes=codes,
        scales=scales,
        zeros=np.asarray(tensors[p + "zeros"], dtype=np.float64),
        offsets=np.asarray(tensors[p + "offsets"], dtype=np.float64),
        bits=int(bits),
        group_size=codes.shape[1] // scales.shape[1],
    )
