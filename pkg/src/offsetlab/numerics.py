"""Dense float64 kernels shared by the model, the estimators and the metrics.

Tensors are plain ``numpy.ndarray`` objects: hidden states are ``(B, P, D)``
arrays, matrices are 2-D. Everything here is a pure function.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptyVector, ShapeMismatch

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_tensor3(a, name: str = "h") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatch(f"{name} must be (B, P, D), got shape {arr.shape}")
    return arr


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    return float(math.sqrt(float(np.dot(v, v))))


def population_variance(v) -> float:
    """Mean squared deviation from the mean (divisor ``len(v)``)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyVector("variance of an empty vector")
    d = v - v.mean()
    return float(np.dot(d, d) / v.size)


def clip_unit(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


def softmax_rows(m) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    m = np.asarray(m, dtype=np.float64)
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def token_norms(h) -> np.ndarray:
    """Channel-wise L2 norm of every token of a ``(B, P, D)`` tensor -> ``(B, P)``."""
    h = as_tensor3(h)
    return np.sqrt(np.einsum("bpd,bpd->bp", h, h))


def mean_token_norm(h) -> float:
    return float(token_norms(h).mean())


def frobenius(a) -> float:
    return l2_norm(a)


# --- splitmix64 -----------------------------------------------------------
#
# Output i (1-based) of a generator seeded with s is mix(s + i * golden), so a
# whole block of the stream can be produced at once.


def splitmix64_next(state: int) -> tuple[int, int]:
    """Scalar reference step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset+1 .. offset+n`` of the splitmix64 stream as uint64."""
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def unit_uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Uniform doubles in [0, 1) from the top 53 bits of each output."""
    return (splitmix64(seed, n, offset) >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def standard_normal(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Box-Muller normals; consumes ``2 * ceil(n / 2)`` stream outputs."""
    pairs = (n + 1) // 2
    u = unit_uniform(seed, 2 * pairs, offset)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n]
