"""Closed-form outlier absorption along the Hessian null space.

For each output channel ``i`` the coefficients ``b_i`` minimize

    J(b) = 1/2 sum_j s_ij (W_ij + b.n_j)^2 + mu1/2 |b|^2 + mu2/2 (b.v)^2

where ``n_j`` is column j of the (K, N) null-space basis, ``v = basis @ 1``
and ``s_i`` is a temperature softmax of ``|W_i|`` that concentrates on the
row's peak entries. The minimizer solves ``A_i b = -rho_i`` with
``A_i = sum_j s_ij n_j n_j^T + mu1 I + mu2 v v^T`` and
``rho_i = sum_j s_ij W_ij n_j``. The layer update is ``W' = W + beta @ basis``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimMismatch
from .linalg import cholesky_solve, cholesky_solve_batched
from .nullspace import DEFAULT_GAMMA, KRule, NullSpaceBasis

UNIFORM = "uniform"
TAU_FLOOR = 1e-8


@dataclass(frozen=True)
class AbsorbConfig:
    tau_rel: float | str = 0.5
    mu1: float = 1e-2
    mu2: float = 1e-2
    gamma: float = DEFAULT_GAMMA
    rule: KRule = KRule.STAY_BELOW

    def __post_init__(self):
        object.__setattr__(self, "rule", KRule.parse(self.rule))
        if isinstance(self.tau_rel, str):
            if self.tau_rel != UNIFORM:
                raise ConfigError(f"tau_rel must be a number or {UNIFORM!r}, got {self.tau_rel!r}")
        elif not 0.0 < self.tau_rel <= 10.0:
            raise ConfigError(f"tau_rel must lie in (0, 10], got {self.tau_rel}")
        if not self.mu1 > 0 or not self.mu2 > 0:
            raise ConfigError("mu1 and mu2 must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def uniform(self) -> bool:
        return self.tau_rel == UNIFORM

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "k_rule": self.rule.value, "mu1": self.mu1, "mu2": self.mu2, "tau_rel": self.tau_rel}


@dataclass
class AbsorbResult:
    beta: np.ndarray
    delta_w: np.ndarray
    w_prime: np.ndarray
    objective_before: np.ndarray
    objective_after: np.ndarray
    linf_before: np.ndarray
    linf_after: np.ndarray
    shift: np.ndarray
    residual: np.ndarray
    lambda_min: np.ndarray
    perturbation: float
    k: int
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        rows = max(len(self.linf_before), 1)
        return {
            "k": self.k,
            "linf_before_max": float(self.linf_before.max(initial=0.0)),
            "linf_after_max": float(self.linf_after.max(initial=0.0)),
            "rows_linf_not_increased": int(np.count_nonzero(self.linf_after <= self.linf_before)),
            "rows": len(self.linf_before),
            "frac_rows_linf_not_increased": float(np.count_nonzero(self.linf_after <= self.linf_before) / rows),
            "objective_before": float(self.objective_before.sum()),
            "objective_after": float(self.objective_after.sum()),
            "channels_objective_worse": int(np.count_nonzero(self.objective_after > self.objective_before + 1e-10)),
            "max_shift": float(self.shift.max(initial=0.0)),
            "max_optimality_residual": float(self.residual.max(initial=0.0)),
            "min_lambda_A": float(self.lambda_min.min(initial=np.inf)) if self.k else None,
            "perturbation": self.perturbation,
        }


def _as_basis(basis) -> np.ndarray:
    if isinstance(basis, NullSpaceBasis):
        return basis.basis
    return np.atleast_2d(np.asarray(basis, dtype=np.float64))


def softmax_weights(w_row, tau) -> np.ndarray:
    """Temperature softmax of ``|w_row|``; ``tau=None`` gives uniform weights."""
    a = np.abs(np.asarray(w_row, dtype=np.float64))
    if tau is None:
        return np.full(a.shape, 1.0 / a.size)
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    e = np.exp(a / tau - a.max() / tau)
    return e / e.sum()


def softmax_weights_rows(w: np.ndarray, tau_rel) -> np.ndarray:
    """Row-wise weights with a per-row temperature ``tau_rel * max|W_i|``."""
    a = np.abs(w)
    if tau_rel == UNIFORM or tau_rel is None:
        return np.full(a.shape, 1.0 / a.shape[1])
    peak = a.max(axis=1, keepdims=True)
    tau = np.maximum(tau_rel * peak, TAU_FLOOR)
    e = np.exp(a / tau - peak / tau)
    return e / e.sum(axis=1, keepdims=True)


def assemble_normal_equation(s, w_row, basis, mu1: float, mu2: float):
    """``(A, rho)`` for one channel."""
    n = _as_basis(basis)
    s = np.asarray(s, dtype=np.float64)
    w_row = np.asarray(w_row, dtype=np.float64)
    if n.shape[1] != s.size or s.size != w_row.size:
        raise DimMismatch(f"basis {n.shape}, weights {s.shape}, row {w_row.shape}")
    v = n.sum(axis=1)
    a = (n * s) @ n.T + mu1 * np.eye(n.shape[0]) + mu2 * np.outer(v, v)
    a = 0.5 * (a + a.T)
    rho = n @ (s * w_row)
    return a, rho


def assemble_rows(s: np.ndarray, w: np.ndarray, n: np.ndarray, mu1: float, mu2: float):
    """Stacked ``A`` (M, K, K) and ``rho`` (M, K) for every channel."""
    k = n.shape[0]
    v = n.sum(axis=1)
    a = np.einsum("kn,mn,ln->mkl", n, s, n, optimize=True)
    a += mu1 * np.eye(k) + mu2 * np.outer(v, v)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    rho = (s * w) @ n.T
    return a, rho


def solve_channel(a, rho) -> np.ndarray:
    return -cholesky_solve(a, rho)


def channel_objective(b, s, w_row, basis, mu1: float, mu2: float) -> float:
    n = _as_basis(basis)
    b = np.asarray(b, dtype=np.float64)
    r = np.asarray(w_row, dtype=np.float64) + b @ n
    v = n.sum(axis=1)
    return float(0.5 * np.sum(np.asarray(s) * r * r) + 0.5 * mu1 * b @ b + 0.5 * mu2 * (b @ v) ** 2)


def channel_gradient(b, s, w_row, basis, mu1: float, mu2: float) -> np.ndarray:
    """Analytic gradient ``A b + rho`` of the channel objective."""
    a, rho = assemble_normal_equation(s, w_row, basis, mu1, mu2)
    return a @ np.asarray(b, dtype=np.float64) + rho


def _objectives(beta, s, w, n, mu1, mu2):
    r = w + beta @ n
    v = n.sum(axis=1)
    return 0.5 * np.sum(s * r * r, axis=1) + 0.5 * mu1 * np.sum(beta * beta, axis=1) + 0.5 * mu2 * (beta @ v) ** 2


def loss_perturbation_audit(delta_w, h) -> float:
    """``1/2 sum_i dW_i^T H dW_i``: the quadratic loss change of a shared-block Hessian."""
    dw = np.asarray(delta_w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if dw.ndim != 2 or h.shape != (dw.shape[1], dw.shape[1]):
        raise DimMismatch(f"delta_w {dw.shape} vs hessian {h.shape}")
    return float(0.5 * np.sum((dw @ h) * dw))


def absorb_layer(w, basis: NullSpaceBasis, h, cfg: AbsorbConfig | None = None) -> AbsorbResult:
    cfg = cfg or AbsorbConfig()
    w = np.asarray(w, dtype=np.float64)
    n = _as_basis(basis)
    m, cols = w.shape
    h = np.asarray(h, dtype=np.float64)
    if n.shape[1] != cols or h.shape != (cols, cols):
        raise DimMismatch(f"weights {w.shape}, basis {n.shape}, hessian {h.shape}")
    linf = np.abs(w).max(axis=1)
    s = softmax_weights_rows(w, cfg.tau_rel)
    k = n.shape[0]
    if k == 0:
        zeros = np.zeros(m)
        obj0 = 0.5 * np.sum(s * w * w, axis=1)
        return AbsorbResult(
            beta=np.zeros((m, 0)), delta_w=np.zeros_like(w), w_prime=w.copy(),
            objective_before=obj0, objective_after=obj0.copy(), linf_before=linf, linf_after=linf.copy(),
            shift=zeros, residual=zeros.copy(), lambda_min=np.full(m, np.nan), perturbation=0.0, k=0,
        )
    a, rho = assemble_rows(s, w, n, cfg.mu1, cfg.mu2)
    beta = -cholesky_solve_batched(a, rho)
    delta = beta @ n
    w_prime = w + delta
    zero = np.zeros_like(beta)
    return AbsorbResult(
        beta=beta,
        delta_w=delta,
        w_prime=w_prime,
        objective_before=_objectives(zero, s, w, n, cfg.mu1, cfg.mu2),
        objective_after=_objectives(beta, s, w, n, cfg.mu1, cfg.mu2),
        linf_before=linf,
        linf_after=np.abs(w_prime).max(axis=1),
        shift=np.abs(delta.sum(axis=1)),
        residual=np.abs(np.einsum("mkl,ml->mk", a, beta) + rho).max(axis=1),
        lambda_min=np.linalg.eigvalsh(a)[:, 0],
        perturbation=loss_perturbation_audit(delta, h),
        k=k,
        extra={"rho_inf": np.abs(rho).max(axis=1)},
    )
