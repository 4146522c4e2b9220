#!/usr/bin/env python3
"""
Dense numeric kernels for the toy transformer.
All inputs and outputs are float32 numpy arrays; products and reductions
accumulate in float64 and round once, so results do not depend on batch shape.
"""
import logging
from typing import Sequence, Union

import numpy as np

from errors import ConfigError, NonFiniteError, ShapeError, UndefinedSimilarityError

logger = logging.getLogger(__name__)

FLOAT = np.float32
ROPE_BASE = 10000.0
DEFAULT_EPS = 1e-5

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def seeded_rng(seed: int) -> np.random.Generator:
    """
    Reproducible generator for every seeded draw in the engine.
    numpy has no xoshiro256** bit generator, so PCG64 takes its place: same
    64-bit seed space, same stream for the same seed on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NonFiniteError on NaN or inf, else return x unchanged"""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return x


def matmul(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Matrix product accumulated in float64, rounded to float32"""
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(FLOAT)


def softmax_temp(logits: ArrayLike, temperature: float) -> np.ndarray:
    """
    Temperature softmax over the last axis.
    temperature == 0 gives a one-hot at the argmax (lowest index wins ties).
    """
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    x = np.asarray(logits, dtype=np.float64)
    check_finite(x, "logits")
    if temperature == 0:
        out = np.zeros_like(x)
        idx = np.argmax(x, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out.astype(FLOAT)
    z = x / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(FLOAT)


def rms_norm(h: ArrayLike, gain: ArrayLike, eps: float = DEFAULT_EPS) -> np.ndarray:
    """h / sqrt(mean(h^2) + eps) * gain over the last axis"""
    h64 = np.asarray(h, dtype=np.float64)
    g64 = np.asarray(gain, dtype=np.float64)
    if h64.shape[-1] != g64.shape[-1]:
        raise ShapeError(f"rms_norm width mismatch: {h64.shape[-1]} vs gain {g64.shape[-1]}")
    if eps <= 0:
        raise ConfigError(f"rms_norm eps must be positive, got {eps}")
    scale = 1.0 / np.sqrt(np.mean(h64 * h64, axis=-1, keepdims=True) + eps)
    return (h64 * scale * g64).astype(FLOAT)


def silu(x: ArrayLike) -> np.ndarray:
    """x * sigmoid(x)"""
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(FLOAT)


def cosine_sim(a: ArrayLike, b: ArrayLike) -> float:
    """Cosine of two flattened vectors; 0 when exactly one is zero"""
    a = np.asarray(a, dtype=FLOAT).ravel()
    b = np.asarray(b, dtype=FLOAT).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim width mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.astype(np.float64)))
    nb = float(np.linalg.norm(b.astype(np.float64)))
    if na == 0.0 and nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of two zero vectors is undefined")
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    value = float(np.dot(a.astype(np.float64), b.astype(np.float64)) / (na * nb))
    return min(1.0, max(-1.0, value))


def rope_angles(positions: Sequence[int], head_dim: int, base: float = ROPE_BASE):
    """cos and sin tables of shape (len(positions), head_dim / 2)"""
    if head_dim % 2 != 0:
        raise ConfigError(f"rotary head dimension must be even, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = pos[:, None] * inv_freq[None, :]
    return np.cos(theta), np.sin(theta)


def apply_rope(qk: ArrayLike, positions: Sequence[int], head_dim: int,
               base: float = ROPE_BASE) -> np.ndarray:
    """
    Rotate-half rotary encoding applied per head.
    qk has shape (rows, n_heads * head_dim); dimension i pairs with i + head_dim/2.
    """
    x = np.asarray(qk, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"apply_rope expects a matrix, got shape {x.shape}")
    if len(positions) != x.shape[0]:
        raise ShapeError(f"apply_rope got {len(positions)} positions for {x.shape[0]} rows")
    cos, sin = rope_angles(positions, head_dim, base)
    if x.shape[1] % head_dim != 0:
        raise ShapeError(f"width {x.shape[1]} is not a multiple of head_dim {head_dim}")
    rows, width = x.shape
    half = head_dim // 2
    x = x.reshape(rows, width // head_dim, head_dim)
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)
    return out.reshape(rows, width).astype(FLOAT)
