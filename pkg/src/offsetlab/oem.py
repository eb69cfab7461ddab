"""Offset estimation: temporal drift, channel dispersion and the combined score."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BadWeight, ShapeMismatch
from .numerics import as_tensor3, frobenius, unit_uniform

#: Score reported when a layer has no previous state to compare against.
WARMUP_SCORE = math.inf


@dataclass(frozen=True)
class OffsetSignals:
    layer: int
    step: int
    d_temp: float
    d_spatial: float
    score: float
    score_normalized: float

    @property
    def warmup(self) -> bool:
        return math.isinf(self.score)


@dataclass(frozen=True)
class NormState:
    ema: float = 0.0
    decay: float = 0.9
    count: int = 0


def temporal_deviation(h_cur, h_prev) -> float:
    """Mean over tokens of the channel-wise L2 distance between two states."""
    a = as_tensor3(h_cur, "h_cur")
    b = as_tensor3(h_prev, "h_prev")
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.einsum("bpd,bpd->bp", d, d)).mean())


def patch_variation_map(h) -> np.ndarray:
    """Per-token channel standard deviation (population), shape ``(B, P)``."""
    h = as_tensor3(h)
    return np.sqrt(h.var(axis=2))


def spatial_variation(h) -> float:
    return float(patch_variation_map(h).mean())


def offset_score(d_temp: float, d_spatial: float, lambda_spatial: float) -> float:
    if lambda_spatial < 0:
        raise BadWeight(f"lambda_spatial must be >= 0, got {lambda_spatial}")
    if d_temp < 0 or d_spatial < 0:
        raise ValueError("deviations must be non-negative")
    return d_temp + lambda_spatial * d_spatial


def normalize_score(raw: float, state: NormState) -> tuple[float, NormState]:
    """Divide ``raw`` by the running EMA of raw scores (including ``raw`` itself).

    The EMA starts at the first observation, so that observation maps to 1.0.
    An all-zero history gives 0.0.
    """
    if raw < 0:
        raise ValueError("raw score must be >= 0")
    if state.count == 0:
        ema = raw
    else:
        ema = state.decay * state.ema + (1.0 - state.decay) * raw
    new = replace(state, ema=ema, count=state.count + 1)
    if ema == 0.0:
        return 0.0, new
    return raw / ema, new


def compute_signals(
    h_cur: np.ndarray,
    h_prev: Optional[np.ndarray],
    layer: int,
    step: int,
    lambda_spatial: float,
) -> OffsetSignals:
    """Raw signals for one layer; a missing previous state yields the warmup sentinel."""
    d_spatial = spatial_variation(h_cur)
    if h_prev is None:
        return OffsetSignals(layer, step, math.nan, d_spatial, WARMUP_SCORE, WARMUP_SCORE)
    d_temp = temporal_deviation(h_cur, h_prev)
    score = offset_score(d_temp, d_spatial, lambda_spatial)
    return OffsetSignals(layer, step, d_temp, d_spatial, score, score)


def estimate_lipschitz(
    block: Callable[[np.ndarray], np.ndarray],
    probe_count: int = 64,
    radius: float = 0.1,
    seed: int = 0,
    shape: Sequence[int] = (1, 4, 8),
    centers: Optional[Sequence[np.ndarray]] = None,
    norm: Callable[[np.ndarray], float] = frobenius,
) -> float:
    """Empirical lower bound on the Lipschitz constant of ``block``.

    Each probe perturbs a base point by a random direction of norm ``radius``
    and records ``norm(block(h + d) - block(h)) / norm(d)``; the maximum ratio
    is returned. Base points cycle through ``centers`` when given, otherwise
    they are drawn uniformly from [-1, 1]^shape.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if centers:
        shape = np.asarray(centers[0]).shape
    n = int(np.prod(shape))
    offset = 0
    best = 0.0
    for i in range(probe_count):
        if centers:
            h = np.asarray(centers[i % len(centers)], dtype=np.float64)
        else:
            h = (2.0 * unit_uniform(seed, n, offset) - 1.0).reshape(shape)
            offset += n
        d = (2.0 * unit_uniform(seed, n, offset) - 1.0).reshape(shape)
        offset += n
        size = norm(d)
        if size == 0.0:
            continue
        d *= radius / size
        step = norm(d)
        best = max(best, norm(block(h + d) - block(h)) / step)
    return best
