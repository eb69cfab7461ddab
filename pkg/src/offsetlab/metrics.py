"""Image fidelity (MSE, PSNR, SSIM) and block-evaluation cost accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Union

import numpy as np

from .errors import ImageTooSmall, ShapeMismatch

if TYPE_CHECKING:
    from .engine import RunTrace

PSNR_CAP = 99.0
SSIM_WINDOW = 8


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be > 0")
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def psnr(a, b, peak: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), peak)


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over non-overlapping 8x8 windows of the last two axes.

    Uniform window weights, population moments, C1 = (0.01 peak)^2 and
    C2 = (0.03 peak)^2. Leading axes (batch) are averaged over.
    """
    a, b = _pair(a, b)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    if a.ndim < 2 or a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ImageTooSmall(f"need at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    k = SSIM_WINDOW
    H, W = (a.shape[-2] // k) * k, (a.shape[-1] // k) * k

    def windows(x):
        x = x[..., :H, :W].reshape(-1, H // k, k, W // k, k)
        return x.transpose(0, 1, 3, 2, 4).reshape(-1, k * k)

    wa, wb = windows(a), windows(b)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    da = wa - mu_a[:, None]
    db = wb - mu_b[:, None]
    var_a = (da * da).mean(axis=1)
    var_b = (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    # rounding can push near-identical windows a few ulps past 1
    return float(np.mean(np.clip(num / den, -1.0, 1.0)))


def dynamic_range(img) -> float:
    """Peak value used for PSNR/SSIM on unbounded latents: max - min, or 1.0 if flat."""
    img = np.asarray(img, dtype=np.float64)
    r = float(img.max() - img.min())
    return r if r > 0 else 1.0


@dataclass
class FidelityReport:
    mse: float
    psnr: float
    ssim: float
    peak: float
    step_mse: list = field(default_factory=list)
    step_psnr: list = field(default_factory=list)

    @property
    def mean_step_mse(self) -> float:
        return float(np.mean(self.step_mse)) if self.step_mse else self.mse

    @property
    def min_step_psnr(self) -> float:
        return float(np.min(self.step_psnr)) if self.step_psnr else self.psnr


def fidelity_report(final, ref_final, step_images=(), ref_step_images=()) -> FidelityReport:
    peak = dynamic_range(ref_final)
    step_mse = [mse(a, b) for a, b in zip(step_images, ref_step_images)]
    err = mse(final, ref_final)
    return FidelityReport(
        mse=err,
        psnr=psnr_from_mse(err, peak),
        ssim=ssim(final, ref_final, peak),
        peak=peak,
        step_mse=step_mse,
        step_psnr=[psnr_from_mse(e, peak) for e in step_mse],
    )


@dataclass
class CostSummary:
    total_block_evals: int
    max_possible: int
    mean_lambda: float
    eval_fraction: float
    predicted_fraction: float
    eligible_records: int


def cost_summary(trace: Union["RunTrace", Iterable["RunTrace"]]) -> CostSummary:
    """Block evaluations actually spent next to the ``1 - p`` prediction.

    ``p`` is the mean applied correction weight over cache-eligible records.
    """
    traces = [trace] if hasattr(trace, "records") else list(trace)
    if not traces or not any(tr.records for tr in traces):
        raise ValueError("empty trace")
    evals = sum(r.block_evals for tr in traces for r in tr.records)
    max_possible = sum(tr.layers * tr.steps for tr in traces)
    weights = [r.weight for tr in traces for r in tr.records if r.eligible]
    p = float(np.mean(weights)) if weights else 1.0
    return CostSummary(
        total_block_evals=evals,
        max_possible=max_possible,
        mean_lambda=p,
        eval_fraction=evals / max_possible,
        predicted_fraction=1.0 - p,
        eligible_records=len(weights),
    )
