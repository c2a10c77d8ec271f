"""Byte token streams: raw files and seeded synthetic generators."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .linalg import Rng

GENERATORS = ("uniform", "markov", "zipf")


def synthetic_tokens(kind: str, n: int, seed: int, vocab: int = 256) -> np.ndarray:
    """``n`` token ids from a named generator.

    uniform: iid over the vocabulary.
    markov: first-order chain where each byte has 8 preferred successors.
    zipf: iid with probability proportional to 1/rank over a shuffled vocabulary.
    """
    rng = Rng(seed)
    if kind == "uniform":
        return rng.integers(0, vocab, n).astype(np.int64)
    if kind == "markov":
        succ = rng.integers(0, vocab, (vocab, 8))
        pick = rng.integers(0, 8, n)
        jump = rng.uniform(n) < 0.05
        fresh = rng.integers(0, vocab, n)
        out = np.empty(n, dtype=np.int64)
        cur = int(fresh[0]) if n else 0
        for i in range(n):
            cur = int(fresh[i]) if jump[i] else int(succ[cur, pick[i]])
            out[i] = cur
        return out
    if kind == "zipf":
        p = 1.0 / np.arange(1, vocab + 1)
        p /= p.sum()
        perm = np.argsort(rng.uniform(vocab), kind="stable")
        cdf = np.cumsum(p)
        idx = np.minimum(np.searchsorted(cdf, rng.uniform(n)), vocab - 1)
        return perm[idx].astype(np.int64)
    raise ConfigError(f"unknown token generator {kind!r}; choose from {GENERATORS}")


def load_tokens(source: str, n: int, seed: int, vocab: int = 256) -> np.ndarray:
    """Resolve a token source: ``synthetic:<kind>`` or a path to a raw byte file."""
    if source.startswith("synthetic:"):
        return synthetic_tokens(source.split(":", 1)[1], n, seed, vocab)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"token file not found: {source}")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64)
    if data.size and data.max() >= vocab:
        raise DataError(f"token file {source} has byte values >= vocab {vocab}")
    return data[:n]


def windows(stream: np.ndarray, count: int, seq_len: int, start: int = 0) -> np.ndarray:
    """``count`` consecutive non-overlapping windows starting at ``start``."""
    need = start + count * seq_len
    if need > stream.size:
        raise DataError(f"token stream too short: need {need} tokens, have {stream.size}")
    return stream[start:need].reshape(count, seq_len)
