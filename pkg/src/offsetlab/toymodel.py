"""A small deterministic DiT-style denoiser and a synthetic moving-blob scene.

The model is deliberately tiny (single-head pre-LN attention + GELU MLP per
block) so that a full 50-step sampling run takes well under a second, while
still producing hidden states that drift smoothly from step to step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BadFrame, BadLabel, BadLayer, SamplingFinished, ShapeMismatch
from .numerics import as_tensor3, softmax_rows, standard_normal, unit_uniform

LN_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class ModelWeights:
    seed: int
    layers: int
    channels: int
    patches: int
    patch_dim: int
    t_max: int
    num_classes: int
    wq: np.ndarray  # (L, D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray  # (L, D, 4D)
    w2: np.ndarray  # (L, 4D, D)
    embed: np.ndarray  # (patch_dim, D)
    time: np.ndarray  # (T_max, D)
    label: np.ndarray  # (num_classes, D)
    decode: np.ndarray  # (D, patch_dim)
    scale: float = 1.0

    ARRAYS = ("wq", "wk", "wv", "wo", "w1", "w2", "embed", "time", "label", "decode")

    def scaled(self, factor: float) -> "ModelWeights":
        """Copy with every weight array multiplied by ``factor``."""
        arrays = {name: _frozen(getattr(self, name) * factor) for name in self.ARRAYS}
        return replace(self, scale=self.scale * factor, **arrays)

    def blob(self) -> bytes:
        return b"".join(getattr(self, name).tobytes() for name in self.ARRAYS)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class _Stream:
    """Sequential reader over one splitmix64 stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self.offset = 0

    def uniform(self, shape, bound: float) -> np.ndarray:
        n = int(np.prod(shape))
        u = unit_uniform(self.seed, n, self.offset)
        self.offset += n
        return ((2.0 * u - 1.0) * bound).reshape(shape)


def init_weights(
    seed: int,
    layers: int,
    channels: int,
    patches: int,
    patch_dim: int,
    t_max: int,
    num_classes: int,
) -> ModelWeights:
    for name, value in [
        ("layers", layers),
        ("channels", channels),
        ("patches", patches),
        ("patch_dim", patch_dim),
        ("t_max", t_max),
        ("num_classes", num_classes),
    ]:
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    D = channels
    s = 1.0 / math.sqrt(D)
    rng = _Stream(seed)
    per_layer = {k: [] for k in ("wq", "wk", "wv", "wo", "w1", "w2")}
    for _ in range(layers):
        for k in ("wq", "wk", "wv", "wo"):
            per_layer[k].append(rng.uniform((D, D), s))
        per_layer["w1"].append(rng.uniform((D, 4 * D), s))
        per_layer["w2"].append(rng.uniform((4 * D, D), s))
    embed = rng.uniform((patch_dim, D), s)
    label = rng.uniform((num_classes, D), s)
    decode = rng.uniform((D, patch_dim), s)
    # Sinusoidal timestep features with random phases: neighbouring steps get
    # nearby embeddings, as with the frequency embeddings of real DiTs.
    phase = rng.uniform((D,), math.pi)
    freq = (math.pi / (2 * t_max)) * 4.0 ** (np.arange(D) / D)
    time = s * np.cos(np.arange(t_max)[:, None] * freq[None, :] + phase[None, :])
    return ModelWeights(
        seed=seed,
        layers=layers,
        channels=D,
        patches=patches,
        patch_dim=patch_dim,
        t_max=t_max,
        num_classes=num_classes,
        **{k: _frozen(np.stack(v)) for k, v in per_layer.items()},
        embed=_frozen(embed),
        time=_frozen(time),
        label=_frozen(label),
        decode=_frozen(decode),
    )


@dataclass
class LatentState:
    x: np.ndarray  # (B, P, patch_dim)
    t: int


def embed(x: LatentState, y: int, w: ModelWeights) -> np.ndarray:
    """Patch projection plus time and label embeddings, broadcast over patches."""
    pixels = as_tensor3(x.x, "x")
    if pixels.shape[2] != w.patch_dim:
        raise ShapeMismatch(f"patch_dim {pixels.shape[2]} != {w.patch_dim}")
    if not 0 <= y < w.num_classes:
        raise BadLabel(f"label {y} outside [0, {w.num_classes})")
    if not 0 <= x.t < w.t_max:
        raise ValueError(f"timestep {x.t} outside [0, {w.t_max})")
    return pixels @ w.embed + w.time[x.t] + w.label[y]


def layer_norm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def attention(h: np.ndarray, layer: int, w: ModelWeights) -> np.ndarray:
    """Single-head self-attention over patches on the layer-normed input (no residual)."""
    a = layer_norm(h)
    q = a @ w.wq[layer]
    k = a @ w.wk[layer]
    v = a @ w.wv[layer]
    scores = softmax_rows(q @ k.transpose(0, 2, 1) / math.sqrt(w.channels))
    return (scores @ v) @ w.wo[layer]


def block_forward(h, layer: int, t: int, w: ModelWeights) -> np.ndarray:
    """One transformer block. ``t`` is accepted for interface parity only:
    timestep conditioning enters through :func:`embed`."""
    if not 0 <= layer < w.layers:
        raise BadLayer(f"layer {layer} outside [0, {w.layers})")
    h = as_tensor3(h)
    if h.shape[2] != w.channels:
        raise ShapeMismatch(f"channels {h.shape[2]} != {w.channels}")
    h1 = h + attention(h, layer, w)
    return h1 + gelu(layer_norm(h1) @ w.w1[layer]) @ w.w2[layer]


def decode(h, w: ModelWeights) -> np.ndarray:
    return as_tensor3(h) @ w.decode


def scheduler_step(x: LatentState, eps, step_size: float) -> LatentState:
    """Deterministic Euler update ``x - step_size * eps`` with ``t -> t - 1``."""
    if x.t < 1:
        raise SamplingFinished("t = 0 has no successor step")
    return LatentState(x.x - step_size * np.asarray(eps, dtype=np.float64), x.t - 1)


def initial_latent(seed: int, batch: int, patches: int, patch_dim: int) -> np.ndarray:
    n = batch * patches * patch_dim
    return standard_normal(seed, n).reshape(batch, patches, patch_dim)


def patch_side(n: int, what: str) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeMismatch(f"{what} = {n} is not a perfect square")
    return side


def patchify(img, patches: int, patch_dim: int) -> np.ndarray:
    """``(B, H, W)`` or ``(H, W)`` image -> ``(B, P, patch_dim)`` tokens, row-major grid."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    g, p = patch_side(patches, "patches"), patch_side(patch_dim, "patch_dim")
    B, H, W = img.shape
    if H != g * p or W != g * p:
        raise ShapeMismatch(f"image {H}x{W} does not tile into {g}x{g} patches of {p}x{p}")
    x = img.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, patches, patch_dim)


def unpatchify(x) -> np.ndarray:
    x = as_tensor3(x, "x")
    B, P, pd = x.shape
    g, p = patch_side(P, "patches"), patch_side(pd, "patch_dim")
    return x.reshape(B, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(B, g * p, g * p)


# --- synthetic motion -------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Gaussian blobs moving with constant per-blob velocity, reflected at borders.

    ``move_prob`` < 1 gives stop-and-go motion: at each frame transition the
    whole scene advances with that probability (drawn from ``seed``), otherwise
    it holds still. ``noise_scale`` sets the noise added when a frame seeds a
    sampling run.
    """

    height: int = 16
    width: int = 16
    centers: tuple = ((4.0, 4.0), (11.0, 10.0))
    radii: tuple = (2.0, 1.5)
    velocity: tuple = ((1.0, 0.5),)
    frames: int = 32
    seed: int = 7
    move_prob: float = 1.0
    noise_scale: float = 0.5

    def blob_velocities(self) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=np.float64).reshape(-1, 2)
        if len(v) == 1:
            v = np.repeat(v, len(self.centers), axis=0)
        if len(v) != len(self.centers):
            raise ValueError("velocity must give one (vy, vx) pair or one per blob")
        return v


def motion_counts(spec: SceneSpec) -> np.ndarray:
    """Number of moving transitions completed by each frame (0 at frame 0)."""
    moves = np.ones(spec.frames, dtype=np.int64)
    moves[0] = 0
    if spec.move_prob < 1.0 and spec.frames > 1:
        u = unit_uniform(spec.seed, spec.frames - 1)
        moves[1:] = (u < spec.move_prob).astype(np.int64)
    return np.cumsum(moves)


def reflect(pos, extent: int):
    """Fold positions into [0, extent - 1] with mirror boundaries."""
    e = extent - 1
    if e <= 0:
        return np.zeros_like(np.asarray(pos, dtype=np.float64))
    u = np.mod(pos, 2 * e)
    return np.where(u <= e, u, 2 * e - u)


def blob_centers(spec: SceneSpec, frame: int) -> np.ndarray:
    if not 0 <= frame < spec.frames:
        raise BadFrame(f"frame {frame} outside [0, {spec.frames})")
    m = motion_counts(spec)[frame]
    raw = np.asarray(spec.centers, dtype=np.float64) + m * spec.blob_velocities()
    return np.stack([reflect(raw[:, 0], spec.height), reflect(raw[:, 1], spec.width)], axis=1)


def synthetic_scene(spec: SceneSpec, frame: int) -> np.ndarray:
    centers = blob_centers(spec, frame)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    img = np.zeros((spec.height, spec.width))
    for (cy, cx), r in zip(centers, spec.radii):
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    return np.clip(img, 0.0, 1.0)
