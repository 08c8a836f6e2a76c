"""Small numeric kernels, seeded random streams and a finite-difference oracle.

Everything runs in float64. Random streams use numpy's Philox (a counter-based
generator, so a given key yields the same stream on every platform). Named
sub-streams are keyed by ``sha256(f"{seed}:{purpose}")`` so that adding a new
consumer never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError

FLOAT = np.float64


def check_finite(a, what: str = "value") -> np.ndarray:
    a = np.asarray(a, dtype=FLOAT)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite {what}")
    return a


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / temperature`` along the last axis.

    Uses max-subtraction, so it is exact under adding a constant to every logit.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = check_finite(logits, "logits") / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = check_finite(logits, "logits") / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x`` (any shape)."""
    if not 1e-7 <= h <= 1e-4:
        raise ConfigError(f"step h={h} outside [1e-7, 1e-4]")
    x = np.array(x, dtype=FLOAT)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function returned non-finite value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def derive_key(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Root of the per-run random streams.

    >>> a = Rng(7).fork("data").normal(size=3)
    >>> b = Rng(7).fork("data").normal(size=3)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)

    def fork(self, purpose: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=derive_key(self.seed, purpose)))

    def subseed(self, purpose: str) -> int:
        return derive_key(self.seed, purpose)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
