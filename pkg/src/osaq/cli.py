"""Command-line driver: ``osaq {calibrate,absorb,quantize,eval,stability,sweep,hist}``.

Every command reads the same option set. Values come from built-in
defaults, then an optional JSON ``--config`` file, then explicit flags.
Outputs land in ``--out`` (a directory) under fixed file names, and every
JSON report is key-sorted and echoes the resolved configuration, so two runs
with the same inputs are byte-identical.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .absorb import AbsorbConfig
from .errors import ConfigError, OsaqError, UnknownLayer
from .nullspace import KRule, stability, tail_energy_curve
from .pipeline import ARMS, absorb_model, calibrate, nullspaces, quantize_model, run_arms
from .quantizer import Backend, QuantConfig, to_tensors as quant_tensors
from .tensorstore import archive_read, archive_write
from .tokens import load_tokens, windows
from .toymodel import InitSpec, ModelConfig, from_archive, model_init_random, perplexity, sample_tokens, to_tensors

DEFAULTS: dict = {
    "model": None,
    "seed": 0,
    "out": "osaq-out",
    "calib": "synthetic:markov",
    "calib_b": None,
    "calib_seqs": 64,
    "calib_offset": 0,
    "seq_len": 128,
    "eval": "model",
    "eval_seqs": 32,
    "hessians": None,
    "absorbed": None,
    "bits": 3,
    "group_size": None,
    "backend": "rtn",
    "damping": 0.01,
    "gamma": 1e-4,
    "tau_rel": 0.5,
    "mu1": 1e-2,
    "mu2": 1e-2,
    "k_rule": "stay-below",
    "outlier_prob": 0.1,
    "outlier_factor": 20.0,
    "resid_rank": 48,
    "archive_dtype": "native",
    "arms": ",".join(ARMS),
    "grid_gamma": None,
    "grid_tau_rel": None,
    "grid_mu1": None,
    "grid_mu2": None,
    "layer": None,
    "bins": 64,
}
MAX_GRID = 64
EVAL_SEED_OFFSET = 1_000_003


# ---------------------------------------------------------------- config


def _tau(value):
    if isinstance(value, str) and value.strip().lower() in ("uniform", "l2"):
        return "uniform"
    return float(value)


def _group(value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("per-channel", "none", "")):
        return None
    return int(value)


def _float_list(value, conv=float):
    if value is None:
        return None
    items = value if isinstance(value, list) else str(value).split(",")
    return [conv(v) for v in items if str(v).strip() != ""]


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    try:
        cfg["tau_rel"] = _tau(cfg["tau_rel"])
        cfg["group_size"] = _group(cfg["group_size"])
        for key in ("seed", "bits", "calib_seqs", "calib_offset", "seq_len", "eval_seqs", "bins"):
            cfg[key] = int(cfg[key])
        for key in ("damping", "gamma", "mu1", "mu2", "outlier_prob", "outlier_factor"):
            cfg[key] = float(cfg[key])
        cfg["resid_rank"] = None if cfg["resid_rank"] in (None, "none") else int(cfg["resid_rank"])
        for key in ("grid_gamma", "grid_mu1", "grid_mu2"):
            cfg[key] = _float_list(cfg[key])
        cfg["grid_tau_rel"] = _float_list(cfg["grid_tau_rel"], _tau)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    if cfg["archive_dtype"] not in ("native", "f32", "f64"):
        raise ConfigError("archive_dtype must be native, f32 or f64")
    if cfg["calib_seqs"] < 0 or cfg["eval_seqs"] < 1 or cfg["seq_len"] < 2 or cfg["bins"] < 1:
        raise ConfigError("calib_seqs >= 0, eval_seqs >= 1, seq_len >= 2 and bins >= 1 are required")
    arms = [a.strip() for a in str(cfg["arms"]).split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS + ("osaq",)]
    if bad:
        raise ConfigError(f"unknown arms {bad}; choose from {ARMS + ('osaq',)}")
    cfg["arms"] = ",".join(arms)
    cfg["k_rule"] = KRule.parse(cfg["k_rule"]).value
    cfg["backend"] = Backend.parse(cfg["backend"]).value
    absorb_cfg(cfg)
    quant_cfg(cfg)
    return cfg


def absorb_cfg(cfg: dict, **override) -> AbsorbConfig:
    c = {**cfg, **override}
    return AbsorbConfig(tau_rel=c["tau_rel"], mu1=c["mu1"], mu2=c["mu2"], gamma=c["gamma"], rule=c["k_rule"])


def quant_cfg(cfg: dict) -> QuantConfig:
    return QuantConfig(bits=cfg["bits"], group_size=cfg["group_size"], backend=cfg["backend"], damping=cfg["damping"])


# ---------------------------------------------------------------- inputs


def load_model(cfg: dict):
    if cfg["model"]:
        path = Path(cfg["model"])
        if not path.is_file():
            raise ConfigError(f"model archive not found: {cfg['model']}")
        return from_archive(archive_read(path))
    init = InitSpec(outlier_prob=cfg["outlier_prob"], outlier_factor=cfg["outlier_factor"], resid_rank=cfg["resid_rank"])
    return model_init_random(ModelConfig(), cfg["seed"], init)


def token_windows(source: str, count: int, seq_len: int, offset: int, seed: int, vocab: int) -> np.ndarray:
    stream = load_tokens(source, (offset + count) * seq_len, seed, vocab)
    return windows(stream, count, seq_len, start=offset * seq_len)


def calib_tokens(cfg: dict, weights, *, source=None, offset=None) -> np.ndarray:
    return token_windows(
        source or cfg["calib"], cfg["calib_seqs"], cfg["seq_len"],
        cfg["calib_offset"] if offset is None else offset, cfg["seed"], weights.cfg.vocab,
    )


def eval_tokens(cfg: dict, weights) -> np.ndarray:
    if cfg["eval"] == "model":
        return sample_tokens(weights, cfg["eval_seqs"], cfg["seq_len"], cfg["seed"] + EVAL_SEED_OFFSET)
    return token_windows(cfg["eval"], cfg["eval_seqs"], cfg["seq_len"], 0, cfg["seed"] + EVAL_SEED_OFFSET, weights.cfg.vocab)


def load_hessians(cfg: dict, weights) -> dict:
    if not cfg["hessians"]:
        return calibrate(weights, calib_tokens(cfg, weights))
    path = Path(cfg["hessians"])
    if not path.is_file():
        raise ConfigError(f"hessian archive not found: {cfg['hessians']}")
    arc = archive_read(path)
    out = {name.split("/", 1)[1]: np.asarray(arr, dtype=np.float64) for name, arr in arc.tensors.items() if name.startswith("hessian/")}
    missing = sorted(set(weights.cfg.linear_names()) - set(out))
    if missing:
        raise UnknownLayer(f"hessian archive lacks layers {missing}")
    return out


# ---------------------------------------------------------------- outputs


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(out: Path, name: str, command: str, cfg: dict, body: dict) -> Path:
    report = {"command": command, "config": cfg, "seed": cfg["seed"], "version": __version__, **body}
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(canonical_json(report))
    return path


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _dtype(cfg: dict):
    # applies to weight and quantization archives; Hessians always stay float64
    return None if cfg["archive_dtype"] == "native" else cfg["archive_dtype"]


def _meta(cfg: dict, weights, **extra) -> dict:
    return {"model_config": weights.cfg.to_json(), "seed": str(cfg["seed"]), "version": __version__, **extra}


# ---------------------------------------------------------------- commands


def cmd_calibrate(cfg: dict) -> int:
    weights = load_model(cfg)
    tokens = calib_tokens(cfg, weights)
    hessians = calibrate(weights, tokens)
    out = Path(cfg["out"])
    tensors, meta = to_tensors(weights)
    archive_write(out / "model.osaq", tensors, meta, dtype=_dtype(cfg))
    archive_write(
        out / "hessians.osaq", {f"hessian/{k}": v for k, v in hessians.items()},
        _meta(cfg, weights, calib_rows=str(tokens.size)),
    )
    bases = nullspaces(hessians, cfg["gamma"], cfg["k_rule"])
    write_csv(
        out / "tail_energy.csv", ["layer", "k", "value"],
        ((name, k, v) for name in sorted(bases) for k, v in tail_energy_curve(bases[name].abs_eigenvalues)),
    )
    layers = {
        name: {"dim": h.shape[0], "k": bases[name].k, "trace": float(np.trace(h))}
        for name, h in hessians.items()
    }
    write_report(out, "calibrate.json", "calibrate", cfg, {
        "layers": layers,
        "calibration": {"sequences": int(tokens.shape[0]), "seq_len": int(tokens.shape[1]), "rows": int(tokens.size)},
    })
    return 0


def cmd_absorb(cfg: dict) -> int:
    weights = load_model(cfg)
    hessians = load_hessians(cfg, weights)
    absorbed = absorb_model(weights, hessians, absorb_cfg(cfg))
    ev = eval_tokens(cfg, weights)
    before, after = perplexity(weights, ev), perplexity(absorbed.weights, ev)
    out = Path(cfg["out"])
    tensors, _ = to_tensors(absorbed.weights)
    tensors.update({f"nullspace/{k}": b.basis for k, b in absorbed.bases.items()})
    archive_write(
        out / "absorbed.osaq", tensors,
        _meta(cfg, weights, absorb_config=json.dumps(_plain(absorb_cfg(cfg).to_dict()), sort_keys=True)),
        dtype=_dtype(cfg),
    )
    write_report(out, "absorb.json", "absorb", cfg, {
        "layers": {name: r.summary() for name, r in absorbed.results.items()},
        "fp_perplexity": {"before": before, "after": after, "relative_change": after / before - 1.0},
    })
    return 0


def cmd_quantize(cfg: dict) -> int:
    weights = load_model(cfg)
    hessians = load_hessians(cfg, weights)
    qcfg = quant_cfg(cfg)
    qm = quantize_model(weights, hessians, qcfg)
    ev = eval_tokens(cfg, weights)
    out = Path(cfg["out"])
    tensors: dict = {}
    for name, q in qm.tensors.items():
        tensors.update(quant_tensors(name, q))
    meta = _meta(cfg, weights, bits=str(qcfg.bits), group_size=str(qcfg.group_size or "per-channel"), backend=qcfg.backend.value)
    archive_write(out / "quantized.osaq", tensors, meta, dtype=_dtype(cfg))
    write_report(out, "quantize.json", "quantize", cfg, {
        "layers": qm.metrics,
        "perplexity": {"input": perplexity(weights, ev), "quantized": perplexity(qm.weights, ev)},
    })
    return 0


def cmd_eval(cfg: dict) -> int:
    weights = load_model(cfg)
    hessians = load_hessians(cfg, weights)
    arms = tuple(cfg["arms"].split(","))
    result = run_arms(weights, None, eval_tokens(cfg, weights), absorb_cfg(cfg), quant_cfg(cfg), arms=arms, hessians=hessians)
    write_report(Path(cfg["out"]), "eval.json", "eval", cfg, result)
    return 0


def cmd_stability(cfg: dict) -> int:
    weights = load_model(cfg)
    source_b = cfg["calib_b"] or cfg["calib"]
    offset_b = cfg["calib_offset"] + cfg["calib_seqs"] if source_b == cfg["calib"] else cfg["calib_offset"]
    h1 = calibrate(weights, calib_tokens(cfg, weights))
    h2 = calibrate(weights, calib_tokens(cfg, weights, source=source_b, offset=offset_b))
    b1 = nullspaces(h1, cfg["gamma"], cfg["k_rule"])
    b2 = nullspaces(h2, cfg["gamma"], cfg["k_rule"])
    rows, layers = [], {}
    for name in sorted(b1):
        k1, k2 = b1[name].k, b2[name].k
        sv = stability(b1[name], b2[name], name).max_singular_value if k1 and k2 else None
        rows.append((name, k1, k2, "" if sv is None else sv))
        layers[name] = {"k1": k1, "k2": k2, "max_singular_value": sv}
    out = Path(cfg["out"])
    write_csv(out / "stability.csv", ["layer", "k1", "k2", "max_sv"], rows)
    measured = [v["max_singular_value"] for v in layers.values() if v["max_singular_value"] is not None]
    write_report(out, "stability.json", "stability", cfg, {
        "layers": layers,
        "splits": {"a": {"source": cfg["calib"], "offset": cfg["calib_offset"]}, "b": {"source": source_b, "offset": offset_b}},
        "min_max_singular_value": min(measured) if measured else None,
    })
    return 0


def sweep_grid(cfg: dict) -> list[dict]:
    axes = {key: cfg[f"grid_{key}"] or [cfg[key]] for key in ("gamma", "tau_rel", "mu1", "mu2")}
    size = math.prod(len(v) for v in axes.values())
    if size > MAX_GRID:
        raise ConfigError(f"sweep grid has {size} points; the limit is {MAX_GRID}")
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def cmd_sweep(cfg: dict) -> int:
    weights = load_model(cfg)
    hessians = load_hessians(cfg, weights)
    ev = eval_tokens(cfg, weights)
    qcfg = quant_cfg(cfg)
    arm = f"osaq+{qcfg.backend.value}"
    base = run_arms(weights, None, ev, absorb_cfg(cfg), qcfg, arms=(qcfg.backend.value,), hessians=hessians)["perplexity"]
    rows, points = [], []
    for point in sweep_grid(cfg):
        res = run_arms(weights, None, ev, absorb_cfg(cfg, **point), qcfg, arms=(arm,), hessians=hessians)
        ppl = res["perplexity"][arm]
        worst = min(d["absorb"]["frac_rows_linf_not_increased"] for d in res["layers"].values())
        rows.append((point["gamma"], point["tau_rel"], point["mu1"], point["mu2"], ppl, worst))
        points.append({**point, "perplexity": ppl})
    ppls = [p["perplexity"] for p in points]
    out = Path(cfg["out"])
    write_csv(out / "sweep.csv", ["gamma", "tau_rel", "mu1", "mu2", "perplexity", "min_frac_rows_linf_not_increased"], rows)
    write_report(out, "sweep.json", "sweep", cfg, {
        "arm": arm,
        "baseline_perplexity": base[qcfg.backend.value],
        "points": points,
        "max_min_ratio": max(ppls) / min(ppls),
    })
    return 0


def histogram(before: np.ndarray, after: np.ndarray, bins: int):
    lo = float(min(before.min(), after.min()))
    hi = float(max(before.max(), after.max()))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(before, edges)[0], np.histogram(after, edges)[0]


def tail_mass(before: np.ndarray, after: np.ndarray, sigma: float) -> dict:
    """Entry count and squared-weight energy beyond 5 sigma of the original layer."""
    out = {}
    for key, w in (("before", before), ("after", after)):
        far = np.abs(w - before.mean()) > 5 * sigma if sigma > 0 else np.zeros(w.shape, bool)
        out[key] = {"count": int(np.count_nonzero(far)), "energy": float(np.sum(w[far] ** 2))}
    return out


def cmd_hist(cfg: dict) -> int:
    weights = load_model(cfg)
    layer = cfg["layer"]
    if not layer:
        raise ConfigError("hist needs --layer")
    before = weights.linear(layer).astype(np.float64)
    if cfg["absorbed"]:
        path = Path(cfg["absorbed"])
        if not path.is_file():
            raise ConfigError(f"absorbed archive not found: {cfg['absorbed']}")
        after = from_archive(archive_read(path)).linear(layer).astype(np.float64)
    else:
        hessians = load_hessians(cfg, weights)
        after = absorb_model(weights, hessians, absorb_cfg(cfg)).weights.linear(layer).astype(np.float64)
    edges, cb, ca = histogram(before, after, cfg["bins"])
    sigma = float(before.std())
    tail = tail_mass(before, after, sigma)
    out = Path(cfg["out"])
    write_csv(out / "hist.csv", ["bin_lo", "bin_hi", "before", "after"], zip(edges[:-1], edges[1:], cb, ca))
    write_report(out, "hist.json", "hist", cfg, {
        "layer": layer,
        "sigma": sigma,
        "beyond_5sigma": tail,
        "linf": {"before": float(np.abs(before).max()), "after": float(np.abs(after).max())},
    })
    return 0


COMMANDS = {
    "calibrate": (cmd_calibrate, "accumulate per-layer Hessians and tail-energy curves"),
    "absorb": (cmd_absorb, "absorb outliers along each layer's Hessian null space"),
    "quantize": (cmd_quantize, "quantize every linear layer and report metrics"),
    "eval": (cmd_eval, "perplexity of FP, RTN, OSAQ+RTN, compensated and OSAQ+compensated"),
    "stability": (cmd_stability, "null-space agreement between two calibration splits"),
    "sweep": (cmd_sweep, "perplexity over a gamma/tau/mu1/mu2 grid"),
    "hist": (cmd_hist, "weight histogram of one layer before and after absorption"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="JSON file with any of the options below; flags override it")
    g.add_argument("--model", help="model archive (.osaq); default: random init from --seed")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--calib", help="calibration tokens: synthetic:{uniform,markov,zipf} or a byte file")
    g.add_argument("--calib-b", dest="calib_b", help="second calibration source for stability")
    g.add_argument("--calib-seqs", dest="calib_seqs", type=int)
    g.add_argument("--calib-offset", dest="calib_offset", type=int, help="first calibration window")
    g.add_argument("--seq-len", dest="seq_len", type=int)
    g.add_argument("--eval", help="evaluation tokens: 'model' samples from the model, else a token source")
    g.add_argument("--eval-seqs", dest="eval_seqs", type=int)
    g.add_argument("--hessians", help="Hessian archive from calibrate; default: calibrate in-process")
    g.add_argument("--archive-dtype", dest="archive_dtype", choices=("native", "f32", "f64"))
    g.add_argument("--outlier-prob", dest="outlier_prob", type=float)
    g.add_argument("--outlier-factor", dest="outlier_factor", type=float)
    g.add_argument("--resid-rank", dest="resid_rank")

    a = common.add_argument_group("absorption")
    a.add_argument("--gamma", type=float)
    a.add_argument("--tau-rel", dest="tau_rel", help="softmax temperature relative to max|W_i|, or 'uniform'")
    a.add_argument("--mu1", type=float)
    a.add_argument("--mu2", type=float)
    a.add_argument("--k-rule", dest="k_rule", choices=[r.value for r in KRule])

    q = common.add_argument_group("quantization")
    q.add_argument("--bits", type=int)
    q.add_argument("--group-size", dest="group_size", help="integer or 'per-channel'")
    q.add_argument("--backend", choices=[b.value for b in Backend])
    q.add_argument("--damping", type=float)
    q.add_argument("--arms", help="comma list for eval")

    s = common.add_argument_group("sweep / hist")
    for key in ("gamma", "tau-rel", "mu1", "mu2"):
        s.add_argument(f"--grid-{key}", dest=f"grid_{key.replace('-', '_')}", help="comma-separated values")
    s.add_argument("--layer")
    s.add_argument("--bins", type=int)
    s.add_argument("--absorbed", help="absorbed archive to compare against (hist)")

    parser = argparse.ArgumentParser(prog="osaq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg)
    except OsaqError as exc:
        print(f"osaq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
