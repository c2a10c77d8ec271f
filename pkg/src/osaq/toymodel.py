"""Tiny decoder-only transformer used for calibration and perplexity.

Pre-RMSNorm blocks with causal multi-head attention and a SiLU-gated FFN,
learned absolute positions, byte-level tokens. Linear layers follow the
``y = x @ W.T`` convention with ``W`` shaped (out, in) and are named
``layer{L}.attn.{q,k,v,o}_proj`` / ``layer{L}.ffn.{gate,up,down}_proj``.
Everything runs in float32.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimMismatch, SequenceTooLong, TokenOutOfRange, UnknownLayer
from .linalg import Rng

LINEAR_ROLES = (
    "attn.q_proj",
    "attn.k_proj",
    "attn.v_proj",
    "attn.o_proj",
    "ffn.gate_proj",
    "ffn.up_proj",
    "ffn.down_proj",
)
RMS_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 172
    max_seq: int = 128
    tie_head: bool = False

    def __post_init__(self):
        for name in ("vocab", "dim", "n_layers", "n_heads", "ffn_dim", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")

    def linear_names(self) -> list[str]:
        return [f"layer{i}.{role}" for i in range(self.n_layers) for role in LINEAR_ROLES]

    def linear_shape(self, name: str) -> tuple[int, int]:
        role = name.split(".", 1)[1] if "." in name else ""
        d, f = self.dim, self.ffn_dim
        shapes = {
            "attn.q_proj": (d, d),
            "attn.k_proj": (d, d),
            "attn.v_proj": (d, d),
            "attn.o_proj": (d, d),
            "ffn.gate_proj": (f, d),
            "ffn.up_proj": (f, d),
            "ffn.down_proj": (d, f),
        }
        if role not in shapes or name not in self.linear_names():
            raise UnknownLayer(f"no linear layer named {name!r}")
        return shapes[role]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class InitSpec:
    """Random-init knobs.

    ``resid_rank`` confines the residual stream to a random subspace of that
    dimension, which gives every attention/FFN input Hessian an exact null
    space of size ``dim - resid_rank``. ``outlier_prob``/``outlier_factor``
    plant one scaled entry per selected row of every linear layer.
    ``head_std`` is larger than ``std`` so the untrained model makes
    confident, weight-sensitive predictions.
    """

    std: float = 0.02
    outlier_prob: float = 0.1
    outlier_factor: float = 20.0
    resid_rank: int | None = 48
    head_std: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelWeights:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def linear(self, name: str) -> np.ndarray:
        if name not in self.tensors or name not in self.cfg.linear_names():
            raise UnknownLayer(f"no linear layer named {name!r}")
        return self.tensors[name]

    def with_linears(self, replacements: dict[str, np.ndarray]) -> "ModelWeights":
        """Copy with some linear weights swapped (cast to float32)."""
        tensors = dict(self.tensors)
        for name, w in replacements.items():
            expected = self.cfg.linear_shape(name)
            if tuple(w.shape) != expected:
                raise DimMismatch(f"{name}: expected shape {expected}, got {w.shape}")
            tensors[name] = np.asarray(w, dtype=np.float32)
        return ModelWeights(self.cfg, tensors)

    def head(self) -> np.ndarray:
        return self.tensors["embed.tokens"] if self.cfg.tie_head else self.tensors["head"]


def model_init_random(cfg: ModelConfig, seed: int, init: InitSpec | None = None) -> ModelWeights:
    init = init or InitSpec()
    rng = Rng(seed)
    d = cfg.dim
    t: dict[str, np.ndarray] = {}

    basis = None
    if init.resid_rank is not None and init.resid_rank < d:
        if init.resid_rank < 1:
            raise ConfigError("resid_rank must be >= 1")
        q, _ = np.linalg.qr(rng.normal((d, d)))
        basis = q[:, : init.resid_rank]
    proj = basis @ basis.T if basis is not None else None

    tok = rng.normal((cfg.vocab, d)) * init.std
    pos = rng.normal((cfg.max_seq, d)) * init.std
    if proj is not None:
        tok, pos = tok @ proj, pos @ proj
    t["embed.tokens"] = tok
    t["embed.positions"] = pos

    for layer in range(cfg.n_layers):
        t[f"layer{layer}.attn_norm"] = np.ones(d)
        t[f"layer{layer}.ffn_norm"] = np.ones(d)
        for role in LINEAR_ROLES:
            name = f"layer{layer}.{role}"
            rows, cols = cfg.linear_shape(name)
            w = rng.normal((rows, cols)) * init.std
            if init.outlier_prob > 0:
                hit = rng.uniform(rows) < init.outlier_prob
                where = rng.integers(0, cols, rows)
                w[hit, where[hit]] *= init.outlier_factor
            if proj is not None and role in ("attn.o_proj", "ffn.down_proj"):
                w = proj @ w
            t[name] = w
    t["norm.final"] = np.ones(d)
    if not cfg.tie_head:
        t["head"] = rng.normal((cfg.vocab, d)) * init.head_std
    return ModelWeights(cfg, {k: v.astype(np.float32) for k, v in t.items()})


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(RMS_EPS))) * gain


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] < 1:
        raise DimMismatch(f"tokens must be a non-empty sequence or batch, got shape {tok.shape}")
    if tok.shape[1] > cfg.max_seq:
        raise SequenceTooLong(f"sequence length {tok.shape[1]} > max_seq {cfg.max_seq}")
    if tok.min() < 0 or tok.max() >= cfg.vocab:
        raise TokenOutOfRange(f"token ids must lie in [0, {cfg.vocab})")
    return tok.astype(np.int64)


def forward_logits(weights: ModelWeights, tokens, taps=None, *, outputs: dict | None = None):
    """Logits for every position plus captured linear-layer inputs.

    ``tokens`` is a 1-D sequence or a (batch, seq) array. ``taps`` names the
    linear layers whose inputs to capture; each capture is a
    (batch*seq, in_dim) float32 array. If ``outputs`` is a dict it receives
    the in-graph output of every tapped layer, same row order.
    Returns ``(logits, captured)`` with logits shaped (seq, vocab) for 1-D
    input and (batch, seq, vocab) otherwise.
    """
    cfg = weights.cfg
    single = np.asarray(tokens).ndim == 1
    tok = _check_tokens(cfg, tokens)
    wanted = set(taps or ())
    unknown = wanted - set(cfg.linear_names())
    if unknown:
        raise UnknownLayer(f"unknown tap(s): {sorted(unknown)}")
    w = weights.tensors
    captured: dict[str, np.ndarray] = {}
    b, n = tok.shape
    hd = cfg.dim // cfg.n_heads

    def linear(name, x):
        y = x @ w[name].T
        if name in wanted:
            captured[name] = x.reshape(-1, x.shape[-1]).copy()
            if outputs is not None:
                outputs[name] = y.reshape(-1, y.shape[-1]).copy()
        return y

    x = w["embed.tokens"][tok] + w["embed.positions"][:n][None]
    mask = np.triu(np.full((n, n), -np.inf, dtype=np.float32), k=1)
    scale = np.float32(1.0 / np.sqrt(hd))
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        h = _rmsnorm(x, w[p + "attn_norm"])
        q = linear(p + "attn.q_proj", h).reshape(b, n, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        k = linear(p + "attn.k_proj", h).reshape(b, n, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        v = linear(p + "attn.v_proj", h).reshape(b, n, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.dim)
        x = x + linear(p + "attn.o_proj", o)
        h = _rmsnorm(x, w[p + "ffn_norm"])
        g = linear(p + "ffn.gate_proj", h)
        u = linear(p + "ffn.up_proj", h)
        act = (g / (np.float32(1.0) + np.exp(-g))) * u
        x = x + linear(p + "ffn.down_proj", act)
    logits = _rmsnorm(x, w["norm.final"]) @ weights.head().T
    return (logits[0] if single else logits), captured


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity_from_logits(logits: np.ndarray, tokens) -> float:
    """exp of the mean next-token NLL over positions 1..n-1 of every sequence."""
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok, logits = tok[None], logits[None]
    if tok.shape[1] < 2:
        raise DimMismatch("perplexity needs sequences of length >= 2")
    lp = log_softmax(logits[:, :-1])
    nll = -np.take_along_axis(lp, tok[:, 1:, None].astype(np.int64), axis=-1)[..., 0]
    return float(np.exp(nll.mean()))


def perplexity(weights: ModelWeights, tokens, *, batch: int = 16) -> float:
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None]
    if tok.shape[1] < 2:
        raise DimMismatch("perplexity needs sequences of length >= 2")
    total, count = 0.0, 0
    for i in range(0, tok.shape[0], batch):
        chunk = tok[i: i + batch]
        logits, _ = forward_logits(weights, chunk)
        lp = log_softmax(logits[:, :-1])
        nll = -np.take_along_axis(lp, chunk[:, 1:, None].astype(np.int64), axis=-1)[..., 0]
        total += float(nll.sum())
        count += nll.size
    return float(np.exp(total / count))


def capture_taps(weights: ModelWeights, tokens, names=None, *, batch: int = 16):
    """Yield ``{name: X}`` per batch of sequences, for streaming Hessian updates."""
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None]
    names = list(names) if names is not None else weights.cfg.linear_names()
    for i in range(0, tok.shape[0], batch):
        _, cap = forward_logits(weights, tok[i: i + batch], names)
        yield cap


def to_tensors(weights: ModelWeights) -> tuple[dict, dict]:
    """Tensor map and metadata for the archive."""
    return dict(weights.tensors), {"model_config": weights.cfg.to_json()}


def from_archive(archive) -> ModelWeights:
    if "model_config" not in archive.metadata:
        raise ConfigError("archive has no model_config metadata; not a model archive")
    cfg = ModelConfig.from_json(archive.metadata["model_config"])
    prefixes = ("embed.", "layer", "norm.", "head")
    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in archive.tensors.items() if k.startswith(prefixes)}
    return ModelWeights(cfg, tensors)


def sample_tokens(weights: ModelWeights, n_seqs: int, seq_len: int, seed: int, *, temperature: float = 1.0) -> np.ndarray:
    """Draw sequences from the model itself (ancestral sampling, no cache).

    Text drawn this way is what the float model predicts best, so any
    weight perturbation raises its expected perplexity.
    """
    cfg = weights.cfg
    if seq_len > cfg.max_seq:
        raise SequenceTooLong(f"seq_len {seq_len} > max_seq {cfg.max_seq}")
    rng = Rng(seed)
    out = np.zeros((n_seqs, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, cfg.vocab, n_seqs)
    for t in range(1, seq_len):
        logits, _ = forward_logits(weights, out[:, :t])
        p = np.exp(log_softmax(logits[:, -1] / temperature))
        cdf = np.cumsum(p, axis=1)
        u = rng.uniform(n_seqs)[:, None] * cdf[:, -1:]
        out[:, t] = np.minimum((cdf < u).sum(axis=1), cfg.vocab - 1)
    return out
