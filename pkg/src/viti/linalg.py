"""Small dense numeric kernel shared by the runtime and the probes.

Matrices are plain 2-D numpy arrays. Weights are stored as float32; every
kernel accumulates in float64 and returns float64 so attention rows keep
their unit-sum tolerance regardless of context length.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite values")


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    m = np.asarray(x, dtype=dtype)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = a @ b
    _finite(out, "matmul")
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    ``-inf`` entries are allowed (masked positions) as long as every row has
    at least one finite entry; NaN is rejected.
    """
    m = as_matrix(m)
    if np.isnan(m).any():
        raise NumericError("softmax_rows: NaN input")
    top = m.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericError("softmax_rows: row without a finite entry")
    e = np.exp(m - top)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not (x.shape[-1] == gain.shape[-1] == bias.shape[-1]):
        raise ShapeError(f"layer_norm: {x.shape[-1]} vs {gain.shape[-1]}/{bias.shape[-1]}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, *stream); same key, same stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.PCG64(ss))
