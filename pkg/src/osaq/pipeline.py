"""In-process calibrate -> absorb -> quantize -> evaluate, shared by the CLI and tests."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .absorb import AbsorbConfig, AbsorbResult, absorb_layer
from .hessian import accumulate, hessian_finalize
from .nullspace import NullSpaceBasis, extract_nullspace
from .quantizer import Backend, QuantConfig, QuantizedTensor, dequantize, output_mse_from_hessian, quantize, reconstruction_metrics
from .toymodel import ModelWeights, capture_taps, perplexity

ARMS = ("fp", "rtn", "osaq+rtn", "compensated", "osaq+compensated")


def calibrate(weights: ModelWeights, calib_tokens, names=None, *, batch: int = 16) -> dict[str, np.ndarray]:
    """Finalized proxy Hessian for every linear layer, keyed by layer name."""
    cfg = weights.cfg
    names = sorted(names or cfg.linear_names())
    dims = {name: cfg.linear_shape(name)[1] for name in names}
    accs = accumulate(capture_taps(weights, calib_tokens, names, batch=batch), names, dims)
    return {name: hessian_finalize(accs[name]) for name in names}


def _digest(h: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(h).tobytes()).hexdigest()


def nullspaces(hessians: dict, gamma: float, rule) -> dict[str, NullSpaceBasis]:
    """One basis per layer; layers fed the same input share a decomposition."""
    cache: dict[tuple, NullSpaceBasis] = {}
    out = {}
    for name in sorted(hessians):
        key = (_digest(hessians[name]), gamma, str(rule))
        if key not in cache:
            cache[key] = extract_nullspace(hessians[name], gamma, rule)
        out[name] = cache[key]
    return out


@dataclass
class AbsorbedModel:
    weights: ModelWeights
    results: dict[str, AbsorbResult]
    bases: dict[str, NullSpaceBasis]


def absorb_model(weights: ModelWeights, hessians: dict, cfg: AbsorbConfig, bases=None) -> AbsorbedModel:
    bases = bases or nullspaces(hessians, cfg.gamma, cfg.rule)
    results = {}
    for name in sorted(hessians):
        results[name] = absorb_layer(weights.linear(name), bases[name], hessians[name], cfg)
    new = weights.with_linears({name: r.w_prime for name, r in results.items()})
    return AbsorbedModel(new, results, bases)


@dataclass
class QuantizedModel:
    weights: ModelWeights
    tensors: dict[str, QuantizedTensor]
    metrics: dict[str, dict] = field(default_factory=dict)


def quantize_model(weights: ModelWeights, hessians: dict, cfg: QuantConfig, reference: ModelWeights | None = None) -> QuantizedModel:
    """Quantize every linear layer; metrics compare against ``reference`` (default: ``weights``)."""
    reference = reference or weights
    tensors, deq, metrics = {}, {}, {}
    for name in sorted(hessians):
        w = weights.linear(name).astype(np.float64)
        q = quantize(w, cfg, hessians[name] if cfg.backend is Backend.COMPENSATED else None)
        tensors[name] = q
        deq[name] = dequantize(q)
        w_ref = reference.linear(name).astype(np.float64)
        m = reconstruction_metrics(w_ref, q)
        m["output_mse"] = output_mse_from_hessian(w_ref - deq[name], hessians[name])
        metrics[name] = m
    return QuantizedModel(weights.with_linears(deq), tensors, metrics)


def run_arms(weights, calib_tokens, eval_tokens, absorb_cfg: AbsorbConfig, quant_cfg: QuantConfig, arms=ARMS, hessians=None) -> dict:
    """Perplexity per comparison arm plus per-layer diagnostics."""
    hessians = hessians if hessians is not None else calibrate(weights, calib_tokens)
    out: dict = {"perplexity": {}, "layers": {}}
    absorbed = None
    if any(a.startswith("osaq") for a in arms):
        absorbed = absorb_model(weights, hessians, absorb_cfg)
        for name, r in absorbed.results.items():
            out["layers"].setdefault(name, {})["absorb"] = r.summary()
    for arm in arms:
        if arm == "fp":
            out["perplexity"]["fp"] = perplexity(weights, eval_tokens)
            continue
        if arm == "osaq":
            out["perplexity"]["osaq"] = perplexity(absorbed.weights, eval_tokens)
            continue
        backend = arm.split("+")[-1]
        src = absorbed.weights if arm.startswith("osaq") else weights
        qcfg = QuantConfig(quant_cfg.bits, quant_cfg.group_size, backend, quant_cfg.damping)
        qm = quantize_model(src, hessians, qcfg, reference=weights)
        out["perplexity"][arm] = perplexity(qm.weights, eval_tokens)
        for name, m in qm.metrics.items():
            out["layers"].setdefault(name, {})[arm] = m
    return out
