"""Run report bundle and the JSON / JSONL / CSV writers used by the CLI."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import __version__
from .acm import Action
from .cachestore import CacheStats
from .engine import ErrorReport, RunTrace
from .metrics import CostSummary, FidelityReport
from .oem import patch_variation_map
from .toymodel import patch_side

SCHEMA_VERSION = 1


def load_schema(name: str) -> dict:
    text = resources.files("offsetlab").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(values)) if values else None


def _finite_or_none(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def timestamp() -> str:
    """UTC time of report creation; honours SOURCE_DATE_EPOCH for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc)
        if epoch
        else dt.datetime.now(dt.timezone.utc)
    )
    return when.replace(microsecond=0).isoformat()


def layer_aggregates(traces: Iterable[RunTrace]) -> list[dict]:
    """Per-layer mean offset score, drift, correction weight and reuse share."""
    by_layer: dict[int, list] = {}
    for tr in traces:
        for r in tr.records:
            by_layer.setdefault(r.layer, []).append(r)
    rows = []
    for layer in sorted(by_layer):
        recs = by_layer[layer]
        n = len(recs)
        rows.append(
            {
                "layer": layer,
                "eligible": any(r.eligible for r in recs),
                "mean_score": _mean(r.score for r in recs),
                "mean_d_temp": _mean(r.d_temp for r in recs),
                "mean_d_spatial": float(np.mean([r.d_spatial for r in recs])),
                "mean_lambda": float(np.mean([r.weight for r in recs])),
                "reuse_fraction": sum(r.action is Action.REUSE for r in recs) / n,
                "eval_fraction": sum(r.block_evals for r in recs) / n,
            }
        )
    return rows


def cache_summary(stats: CacheStats) -> dict:
    out = asdict(stats)
    n = stats.eligible_steps
    out["hit_rate"] = stats.reuse_weight_sum / n if n else None
    out["binary_reuse_rate"] = stats.reuses / n if n else None
    return out


def fidelity_summary(f: FidelityReport) -> dict:
    return {
        "mse": f.mse,
        "psnr": f.psnr,
        "ssim": f.ssim,
        "peak": f.peak,
        "mean_step_mse": f.mean_step_mse,
        "min_step_psnr": f.min_step_psnr,
        # perceptual metrics need pretrained networks; kept for column parity
        "fid": None,
        "t_fid": None,
    }


def error_summary(e: ErrorReport) -> dict:
    dev = e.layer_deviation
    return {
        "lipschitz": list(e.lipschitz),
        "blend_records": e.blend_records,
        "blend_identity_max_rel_err": e.blend_identity_max_rel_err,
        "bound_records": e.bound_records,
        "bound_slack_min": _finite_or_none(e.bound_slack_min),
        "bound_holds_rate": e.bound_holds_rate,
        "drift_bound_records": e.drift_bound_records,
        "drift_bound_rate": e.drift_bound_rate,
        "max_layer_deviation": float(np.max(dev)) if dev else None,
        "final_layer_deviation": float(np.max(dev[-1])) if dev else None,
    }


@dataclass
class ReportBundle:
    config: dict
    policy_label: str
    frames: int
    cost: dict
    fidelity: dict
    cache: dict
    errors: dict
    layers: list
    heatmaps: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: str = ""
    tool: str = "offsetlab"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ReportBundle":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown report keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReportBundle":
        return cls.from_dict(json.loads(text))


def build_report(
    config_dict: dict,
    label: str,
    traces: list,
    cost: CostSummary,
    errors: ErrorReport,
    heatmaps: Optional[list] = None,
) -> ReportBundle:
    stats = CacheStats()
    for tr in traces:
        stats = stats.merge(tr.stats)
    seconds = [s for tr in traces for s in tr.step_seconds]
    return ReportBundle(
        config=config_dict,
        policy_label=label,
        frames=len(traces),
        cost=asdict(cost),
        fidelity=fidelity_summary(errors.fidelity),
        cache=cache_summary(stats),
        errors=error_summary(errors),
        layers=layer_aggregates(traces),
        heatmaps=list(heatmaps or []),
        wall_clock={
            "total_seconds": float(sum(seconds)),
            "mean_step_seconds": float(np.mean(seconds)) if seconds else 0.0,
        },
        timestamp=timestamp(),
    )


# --- file writers -------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"refusing to write non-finite value {v} to CSV")
        return repr(v)
    return str(v)


def write_csv(path: Path, header: list, rows: Iterable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[k] for k in header]
            writer.writerow([_cell(v) for v in row])


def write_trace(path: Path, traces: list) -> int:
    n = 0
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for tr in traces:
            for r in tr.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True, allow_nan=False))
                fh.write("\n")
                n += 1
    return n


LAYER_COLUMNS = [
    "layer",
    "eligible",
    "mean_score",
    "mean_d_temp",
    "mean_d_spatial",
    "mean_lambda",
    "reuse_fraction",
    "eval_fraction",
]


def write_layers(path: Path, layers: list) -> None:
    write_csv(path, LAYER_COLUMNS, layers)


def write_heatmaps(out: Path, trace: RunTrace) -> list[str]:
    """One ``heatmap_<step>.csv`` per timestep: layer-averaged patch variation on the patch grid."""
    if trace.inputs is None:
        return []
    side = patch_side(trace.config.model.patches, "patches")
    names = []
    for k in range(trace.inputs.shape[0]):
        t = trace.steps - 1 - k
        grid = np.mean([patch_variation_map(h)[0] for h in trace.inputs[k]], axis=0)
        name = f"heatmap_{t:03d}.csv"
        write_csv(out / name, [f"col{j}" for j in range(side)], grid.reshape(side, side).tolist())
        names.append(name)
    return names
