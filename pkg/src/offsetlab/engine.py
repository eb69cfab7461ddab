"""Cached sampling loop: per step, per layer, estimate drift, decide, blend, store.

A single run uses one cache lane whose clock is the (decreasing) timestep.
A frame sequence keeps one lane per timestep and carries it across frames,
so step ``t`` of frame ``f`` is corrected against step ``t`` of the last
frame that touched that lane; the lane clock is then the frame index.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .acm import FULL, Action, PolicyConfig, PolicyKind, blend, correction_weight, decide
from .cachestore import CacheStats, CacheStore, hit_rate
from .errors import BadConfig, IncomparableRuns, NoEligibleSteps
from .metrics import FidelityReport, fidelity_report
from .numerics import frobenius, mean_token_norm
from .oem import NormState, compute_signals, estimate_lipschitz, normalize_score, temporal_deviation
from .toymodel import (
    LatentState,
    ModelWeights,
    SceneSpec,
    block_forward,
    decode,
    embed,
    init_weights,
    initial_latent,
    patch_side,
    patchify,
    scheduler_step,
    synthetic_scene,
    unpatchify,
)


@dataclass(frozen=True)
class ModelParams:
    layers: int = 8
    channels: int = 32
    patches: int = 16
    patch_dim: int = 16
    steps: int = 50
    num_classes: int = 10
    batch: int = 1
    weight_scale: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    weights_seed: int = 7
    latent_seed: int = 7
    label: int = 0
    step_size: float = 0.05
    model: ModelParams = ModelParams()
    policy: PolicyConfig = PolicyConfig()
    scene: Optional[SceneSpec] = None

    def validate(self) -> None:
        m = self.model
        for name in ("layers", "channels", "patches", "patch_dim", "num_classes", "batch"):
            if getattr(m, name) < 1:
                raise BadConfig(f"model.{name}", "must be >= 1")
        if m.steps < 2:
            raise BadConfig("model.steps", "must be >= 2")
        for name in ("patches", "patch_dim"):
            side = math.isqrt(getattr(m, name))
            if side * side != getattr(m, name):
                raise BadConfig(f"model.{name}", "must be a perfect square")
        if not m.weight_scale > 0:
            raise BadConfig("model.weight_scale", "must be > 0")
        if not 0 <= self.label < m.num_classes:
            raise BadConfig("label", f"must lie in [0, {m.num_classes})")
        if not (self.step_size >= 0 and math.isfinite(self.step_size)):
            raise BadConfig("step_size", "must be finite and >= 0")
        for name in ("weights_seed", "latent_seed"):
            if not 0 <= getattr(self, name) < 2**64:
                raise BadConfig(name, "must be a uint64")
        self.policy.validate(m.layers)
        if self.scene is not None:
            s = self.scene
            if s.frames < 2:
                raise BadConfig("scene.frames", "must be >= 2")
            side = patch_side(m.patches, "patches") * patch_side(m.patch_dim, "patch_dim")
            if (s.height, s.width) != (side, side):
                raise BadConfig("scene.height", f"scene must be {side}x{side} for this model")
            if len(s.radii) != len(s.centers):
                raise BadConfig("scene.radii", "need one radius per blob")
            if not 0.0 <= s.move_prob <= 1.0:
                raise BadConfig("scene.move_prob", "must lie in [0, 1]")

    def with_policy(self, policy: PolicyConfig) -> "RunConfig":
        return replace(self, policy=policy)

    def weights(self) -> ModelWeights:
        return _weights(self.weights_seed, self.model)


@lru_cache(maxsize=16)
def _weights(seed: int, m: ModelParams) -> ModelWeights:
    w = init_weights(seed, m.layers, m.channels, m.patches, m.patch_dim, m.steps, m.num_classes)
    return w if m.weight_scale == 1.0 else w.scaled(m.weight_scale)


@dataclass
class Record:
    frame: int
    step: int
    layer: int
    eligible: bool
    d_temp: float
    d_spatial: float
    score: float
    score_used: float
    lam: float  # weight computed from the score
    action: Action
    weight: float  # weight actually applied (0 for Reuse)
    cache_age: Optional[int]
    block_evals: int
    fresh_gap: Optional[float] = None  # |fresh - cached|, Frobenius
    blend_gap: Optional[float] = None  # |fresh - corrected|, Frobenius
    fresh_gap_token: Optional[float] = None  # |fresh - cached|, mean token norm
    lag: Optional[int] = None
    drift: Optional[float] = None
    drift_bound_holds: Optional[bool] = None

    def to_json(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, Action):
                v = v.value
            elif isinstance(v, float) and not math.isfinite(v):
                v = None
            out[k] = v
        return out


@dataclass
class RunTrace:
    config: RunConfig
    frame: int
    records: list
    images: list  # per-step latent images (B, H, W) after the update
    final_image: np.ndarray
    stats: CacheStats
    step_seconds: list
    inputs: Optional[np.ndarray] = None  # (T, L, B, P, D) layer inputs
    outputs: Optional[np.ndarray] = None  # (T, L, B, P, D) corrected layer outputs

    @property
    def layers(self) -> int:
        return self.config.model.layers

    @property
    def steps(self) -> int:
        return self.config.model.steps

    @property
    def block_evals(self) -> int:
        return sum(r.block_evals for r in self.records)

    def hit_rate(self) -> Optional[float]:
        try:
            return hit_rate(self.stats)
        except NoEligibleSteps:
            return None


@dataclass
class _Lane:
    store: CacheStore
    norms: list
    content_clock: dict = field(default_factory=dict)
    content_input: dict = field(default_factory=dict)


def _new_lane(policy: PolicyConfig, layers: int, decreasing: bool) -> _Lane:
    norms = [NormState(decay=policy.norm_decay) for _ in range(layers)]
    return _Lane(CacheStore(decreasing=decreasing), norms)


def _sample(cfg: RunConfig, x0: np.ndarray, lanes, frame: Optional[int], record_states: bool) -> RunTrace:
    """One full sampling run. ``frame=None`` is a standalone run on ``lanes[0]``."""
    w = cfg.weights()
    pol = cfg.policy
    L, T = cfg.model.layers, cfg.model.steps
    eligible = pol.eligible(L)
    records, images, seconds = [], [], []
    inputs = outputs = None
    if record_states:
        shape = (T, L, cfg.model.batch, cfg.model.patches, cfg.model.channels)
        inputs, outputs = np.empty(shape), np.empty(shape)

    state = LatentState(np.array(x0, dtype=np.float64), T - 1)
    final = None
    for k, t in enumerate(range(T - 1, -1, -1)):
        started = time.perf_counter()
        lane = lanes[0] if frame is None else lanes[t]
        clock = t if frame is None else frame
        tick = k if frame is None else frame
        forced = pol.refresh_interval is not None and tick % pol.refresh_interval == 0
        store = lane.store
        h = embed(state, cfg.label, w)
        for layer in range(L):
            is_eligible = layer in eligible
            entry, age = None, None
            if is_eligible:
                hit = store.get(layer, clock, pol.tau_max)
                if hit is not None:
                    entry, age = hit
            else:
                entry = store.peek(layer)
                age = store.age(entry, clock) if entry is not None else None

            sig = compute_signals(h, entry.input if entry is not None else None, layer, t, pol.lambda_spatial)
            used = sig.score
            if not sig.warmup and pol.normalize_scores:
                used, lane.norms[layer] = normalize_score(sig.score, lane.norms[layer])
            lam = correction_weight(used, pol.gamma)
            if not is_eligible or forced:
                decision = FULL
            else:
                decision = decide(pol, lam, clock, layer, age if entry is not None else None, score=used)

            rec = Record(
                frame=frame or 0,
                step=t,
                layer=layer,
                eligible=is_eligible,
                d_temp=sig.d_temp,
                d_spatial=sig.d_spatial,
                score=sig.score,
                score_used=used,
                lam=lam,
                action=decision.action,
                weight=decision.weight,
                cache_age=age,
                block_evals=0 if decision.action is Action.REUSE else 1,
            )
            if is_eligible and entry is not None:
                rec.lag = abs(clock - lane.content_clock[layer])
                rec.drift = temporal_deviation(h, lane.content_input[layer])
                rec.drift_bound_holds = bool(rec.drift <= rec.lag * sig.score)

            if decision.action is Action.FULL:
                out = block_forward(h, layer, t, w)
            elif decision.action is Action.BLEND:
                fresh = block_forward(h, layer, t, w)
                out = blend(entry.output, fresh, decision.weight)
                rec.fresh_gap = frobenius(fresh - entry.output)
                rec.blend_gap = frobenius(fresh - out)
                rec.fresh_gap_token = temporal_deviation(fresh, entry.output)
            else:
                out = entry.output

            if decision.action is not Action.REUSE:
                lane.content_clock[layer] = clock
                lane.content_input[layer] = h
            store.put(layer, h, out, clock)
            if is_eligible:
                store.record_reuse(decision.weight, skipped=decision.action is Action.REUSE)
            if record_states:
                inputs[k, layer] = h
                outputs[k, layer] = out
            records.append(rec)
            h = out

        eps = decode(h, w)
        if t >= 1:
            state = scheduler_step(state, eps, cfg.step_size)
            x = state.x
        else:
            x = state.x - cfg.step_size * eps
            final = x
        images.append(unpatchify(x))
        seconds.append(time.perf_counter() - started)

    return RunTrace(
        config=cfg,
        frame=frame or 0,
        records=records,
        images=images,
        final_image=unpatchify(final),
        stats=lanes[0].store.stats,
        step_seconds=seconds,
        inputs=inputs,
        outputs=outputs,
    )


def _initial_latent(cfg: RunConfig) -> np.ndarray:
    m = cfg.model
    return initial_latent(cfg.latent_seed, m.batch, m.patches, m.patch_dim)


def run_inference(config: RunConfig, record_states: bool = True) -> RunTrace:
    config.validate()
    lane = _new_lane(config.policy, config.model.layers, decreasing=True)
    return _sample(config, _initial_latent(config), [lane], None, record_states)


def reference_config(config: RunConfig) -> RunConfig:
    return config.with_policy(replace(config.policy, kind=PolicyKind.FULL_RECOMPUTE))


def run_reference(config: RunConfig, record_states: bool = True) -> RunTrace:
    return run_inference(reference_config(config), record_states)


def frame_latent(config: RunConfig, scene: SceneSpec, frame: int) -> np.ndarray:
    m = config.model
    img = np.broadcast_to(synthetic_scene(scene, frame), (m.batch, scene.height, scene.width))
    return patchify(img, m.patches, m.patch_dim) + scene.noise_scale * _initial_latent(config)


def run_sequence(config: RunConfig, scene: Optional[SceneSpec] = None, record_states: bool = False) -> list:
    """One sampling run per frame; cache lanes persist from frame to frame."""
    scene = scene or config.scene
    if scene is None:
        raise BadConfig("scene", "a scene is required for sequence runs")
    config = replace(config, scene=scene)
    config.validate()
    T = config.model.steps
    lanes = [_new_lane(config.policy, config.model.layers, decreasing=False) for _ in range(T)]
    traces = []
    for f in range(scene.frames):
        stats = CacheStats()
        for lane in lanes:
            lane.store.stats = stats
        traces.append(_sample(config, frame_latent(config, scene, f), lanes, f, record_states))
    return traces


def execute(config: RunConfig, record_states: Optional[bool] = None) -> list:
    """Run a config: a frame sequence when it carries a scene, else a single run."""
    if config.scene is not None:
        return run_sequence(config, record_states=bool(record_states))
    return [run_inference(config, True if record_states is None else record_states)]


# --- comparison against the full-recompute reference ------------------------


@dataclass
class ErrorReport:
    fidelity: FidelityReport
    layer_deviation: Optional[list]  # [step index][layer], mean token norm vs reference
    lipschitz: list  # empirical per-layer lower bounds
    blend_records: int
    blend_identity_max_rel_err: float
    bound_records: int
    bound_slack_min: Optional[float]
    bound_holds_rate: Optional[float]
    drift_bound_records: int
    drift_bound_rate: Optional[float]


def _strip_policy(cfg: RunConfig) -> RunConfig:
    return cfg.with_policy(PolicyConfig())


def layer_lipschitz(trace: RunTrace, probe_count: int = 64, radius: float = 0.1) -> list:
    """Per-layer empirical Lipschitz estimate (mean-token-norm), probed around recorded inputs."""
    cfg = trace.config
    w = cfg.weights()
    m = cfg.model
    out = []
    for layer in range(m.layers):
        centers = None
        if trace.inputs is not None:
            idx = np.linspace(0, m.steps - 1, 8).astype(int)
            centers = [trace.inputs[i, layer] for i in idx]
        out.append(
            estimate_lipschitz(
                lambda h, _l=layer: block_forward(h, _l, 0, w),
                probe_count=probe_count,
                radius=radius,
                seed=cfg.weights_seed + layer,
                shape=(m.batch, m.patches, m.channels),
                centers=centers,
                norm=mean_token_norm,
            )
        )
    return out


def compare_runs(test: RunTrace, ref: RunTrace, lipschitz: Optional[list] = None) -> ErrorReport:
    if _strip_policy(test.config) != _strip_policy(ref.config) or test.frame != ref.frame:
        raise IncomparableRuns("traces come from different configurations or frames")
    fid = fidelity_report(test.final_image, ref.final_image, test.images, ref.images)

    deviation = None
    if test.outputs is not None and ref.outputs is not None:
        d = test.outputs - ref.outputs
        deviation = np.sqrt(np.einsum("tlbpd,tlbpd->tlbp", d, d)).mean(axis=(2, 3)).tolist()

    if lipschitz is None:
        lipschitz = layer_lipschitz(ref if ref.inputs is not None else test)

    blends = [r for r in test.records if r.action is Action.BLEND]
    rel_errs = []
    slacks = []
    for r in blends:
        expected = (1.0 - r.weight) * r.fresh_gap
        diff = abs(r.blend_gap - expected)
        rel_errs.append(0.0 if diff == 0.0 else diff / max(expected, r.blend_gap))
        bound = (1.0 - r.weight) * lipschitz[r.layer] * r.lag * r.score
        slacks.append(bound - (1.0 - r.weight) * r.fresh_gap_token)
    holds = [r.drift_bound_holds for r in test.records if r.drift_bound_holds is not None]
    return ErrorReport(
        fidelity=fid,
        layer_deviation=deviation,
        lipschitz=list(lipschitz),
        blend_records=len(blends),
        blend_identity_max_rel_err=max(rel_errs, default=0.0),
        bound_records=len(slacks),
        bound_slack_min=min(slacks) if slacks else None,
        bound_holds_rate=float(np.mean([s >= 0 for s in slacks])) if slacks else None,
        drift_bound_records=len(holds),
        drift_bound_rate=float(np.mean(holds)) if holds else None,
    )


def compare_sequences(tests: list, refs: list, lipschitz: Optional[list] = None) -> ErrorReport:
    """Frame-by-frame comparison pooled into one report.

    Fidelity is computed on the stacked final images of all frames (and per
    step on the stacked step images), so one peak covers the whole sequence.
    """
    if len(tests) != len(refs) or not tests:
        raise IncomparableRuns("sequences differ in length")
    if lipschitz is None:
        lipschitz = layer_lipschitz(refs[0] if refs[0].inputs is not None else tests[0])
    parts = [compare_runs(a, b, lipschitz) for a, b in zip(tests, refs)]
    steps = len(tests[0].images)
    fid = fidelity_report(
        np.concatenate([tr.final_image for tr in tests]),
        np.concatenate([tr.final_image for tr in refs]),
        [np.concatenate([tr.images[k] for tr in tests]) for k in range(steps)],
        [np.concatenate([tr.images[k] for tr in refs]) for k in range(steps)],
    )
    deviation = None
    if all(p.layer_deviation is not None for p in parts):
        deviation = np.mean([p.layer_deviation for p in parts], axis=0).tolist()

    def pooled(rate, count):
        total = sum(getattr(p, count) for p in parts)
        if total == 0:
            return None
        return sum(getattr(p, rate) * getattr(p, count) for p in parts if getattr(p, count)) / total

    slacks = [p.bound_slack_min for p in parts if p.bound_slack_min is not None]
    return ErrorReport(
        fidelity=fid,
        layer_deviation=deviation,
        lipschitz=list(lipschitz),
        blend_records=sum(p.blend_records for p in parts),
        blend_identity_max_rel_err=max(p.blend_identity_max_rel_err for p in parts),
        bound_records=sum(p.bound_records for p in parts),
        bound_slack_min=min(slacks) if slacks else None,
        bound_holds_rate=pooled("bound_holds_rate", "bound_records"),
        drift_bound_records=sum(p.drift_bound_records for p in parts),
        drift_bound_rate=pooled("drift_bound_rate", "drift_bound_records"),
    )


def compare_all(tests: list, refs: list, lipschitz: Optional[list] = None) -> ErrorReport:
    """``compare_runs`` for a single run, ``compare_sequences`` otherwise."""
    if len(tests) == 1 and len(refs) == 1:
        return compare_runs(tests[0], refs[0], lipschitz)
    return compare_sequences(tests, refs, lipschitz)
