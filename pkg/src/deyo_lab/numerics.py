"""Small numeric helpers shared by the rest of the package.

Arrays are plain float64 numpy arrays. Randomness goes through
``numpy.random.Generator`` backed by the counter-based Philox bit generator,
so a seed fully determines every draw.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericInputError


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator. Equal seeds give equal streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn(rng: np.random.Generator, n: int = 1) -> list[np.random.Generator]:
    """Independent child generators, for handing one to each worker."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def _check_finite(a, name="input"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericInputError(f"non-finite values in {name}")
    return a


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis, using max-subtraction."""
    z = _check_finite(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _check_finite(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(probs) -> np.ndarray:
    """Shannon entropy (natural log) along the last axis, with 0*log(0) = 0."""
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def sigmoid(a):
    """Logistic function, evaluated without overflow for either sign."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out[()] if out.ndim == 0 else out


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise product of {a.shape} and {b.shape}")
    return a * b
