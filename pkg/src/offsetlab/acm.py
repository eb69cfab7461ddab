"""Adaptive correction: offset score -> correction weight -> reuse decision and blend."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import BadConfig, BadSensitivity, BadWeight, ShapeMismatch
from .numerics import clip_unit


class PolicyKind(str, Enum):
    ADAPTIVE = "Adaptive"
    STATIC_INTERVAL = "StaticInterval"
    BINARY_THRESHOLD = "BinaryThreshold"
    FULL_RECOMPUTE = "FullRecompute"
    PURE_REUSE = "PureReuse"


class Mode(str, Enum):
    FAITHFUL = "Faithful"
    ECONOMIC = "Economic"


class Action(str, Enum):
    REUSE = "Reuse"
    BLEND = "BlendCompute"
    FULL = "FullCompute"


@dataclass(frozen=True)
class PolicyConfig:
    """Per-run caching policy.

    ``eligible_layers=None`` means every layer except the first and the last.
    ``refresh_interval`` forces a full recompute on every R-th tick when set.
    """

    kind: PolicyKind = PolicyKind.ADAPTIVE
    gamma: float = 1.0
    lambda_spatial: float = 1.0
    skip_threshold: float = 0.05
    interval: int = 2
    binary_threshold: float = 1.0
    tau_max: int = 4
    mode: Mode = Mode.FAITHFUL
    normalize_scores: bool = True
    norm_decay: float = 0.9
    eligible_layers: Optional[tuple] = None
    refresh_interval: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.eligible_layers is not None:
            object.__setattr__(self, "eligible_layers", tuple(int(i) for i in self.eligible_layers))

    def validate(self, layers: Optional[int] = None) -> None:
        checks = [
            ("gamma", self.gamma >= 0 and math.isfinite(self.gamma)),
            ("lambda_spatial", self.lambda_spatial >= 0 and math.isfinite(self.lambda_spatial)),
            ("skip_threshold", 0.0 <= self.skip_threshold <= 1.0),
            ("interval", self.interval >= 1),
            ("binary_threshold", self.binary_threshold >= 0),
            ("tau_max", self.tau_max >= 1),
            ("norm_decay", 0.0 < self.norm_decay < 1.0),
            ("refresh_interval", self.refresh_interval is None or self.refresh_interval >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise BadConfig(f"policy.{name}", f"invalid value {getattr(self, name)!r}")
        if layers is not None and self.eligible_layers is not None:
            if any(not 0 <= i < layers for i in self.eligible_layers):
                raise BadConfig("policy.eligible_layers", f"layer index outside [0, {layers})")

    def eligible(self, layers: int) -> frozenset:
        if self.eligible_layers is None:
            return frozenset(range(1, layers - 1))
        return frozenset(self.eligible_layers)

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.ADAPTIVE:
            return f"Adaptive/{self.mode.value}"
        if self.kind is PolicyKind.STATIC_INTERVAL:
            return f"StaticInterval(N={self.interval})"
        if self.kind is PolicyKind.BINARY_THRESHOLD:
            return f"BinaryThreshold(theta={self.binary_threshold:g})"
        return self.kind.value


@dataclass(frozen=True)
class ReuseDecision:
    action: Action
    weight: float


FULL = ReuseDecision(Action.FULL, 1.0)
REUSE = ReuseDecision(Action.REUSE, 0.0)


def correction_weight(score: float, gamma: float) -> float:
    """``clip(gamma * score, 0, 1)``; the infinite warmup score maps to 1."""
    if gamma < 0:
        raise BadSensitivity(f"gamma must be >= 0, got {gamma}")
    if math.isinf(score):
        return 1.0
    return clip_unit(gamma * score)


def blend(cached, fresh, lam: float) -> np.ndarray:
    """Convex combination ``(1 - lam) * cached + lam * fresh``."""
    cached = np.asarray(cached, dtype=np.float64)
    fresh = np.asarray(fresh, dtype=np.float64)
    if cached.shape != fresh.shape:
        raise ShapeMismatch(f"{cached.shape} vs {fresh.shape}")
    if not 0.0 <= lam <= 1.0:
        raise BadWeight(f"correction weight {lam} outside [0, 1]")
    # Endpoints return exact copies so lam = 1 is bit-identical to fresh compute.
    if lam == 1.0:
        return fresh.copy()
    if lam == 0.0:
        return cached.copy()
    return (1.0 - lam) * cached + lam * fresh


def decide(
    config: PolicyConfig,
    lam: float,
    t: int,
    layer: int,
    cache_age: Optional[int],
    score: Optional[float] = None,
) -> ReuseDecision:
    """Choose what to do for one cache-eligible layer at one step.

    ``cache_age=None`` means no valid entry. ``score`` is the value ``lam`` was
    derived from; the binary-threshold baseline compares it against its
    threshold (falling back to ``lam / gamma`` when omitted).
    """
    if cache_age is None or cache_age > config.tau_max:
        return FULL
    kind = config.kind
    if kind is PolicyKind.FULL_RECOMPUTE:
        return FULL
    if kind is PolicyKind.PURE_REUSE:
        return REUSE
    if kind is PolicyKind.STATIC_INTERVAL:
        return REUSE if t % config.interval != 0 else FULL
    if kind is PolicyKind.BINARY_THRESHOLD:
        if score is None:
            score = lam / config.gamma if config.gamma > 0 else math.inf
        return REUSE if score <= config.binary_threshold else FULL
    if config.mode is Mode.ECONOMIC and lam <= config.skip_threshold:
        return REUSE
    return ReuseDecision(Action.BLEND, lam)
