"""Command-line entry point: ``run``, ``sweep`` and ``compare``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import jsonschema
import numpy as np

from .acm import PolicyConfig
from .engine import ModelParams, RunConfig, compare_all, execute, reference_config
from .errors import BadConfig, OffsetLabError
from .metrics import cost_summary, fidelity_report
from .report import ReportBundle, build_report, load_schema, write_csv, write_heatmaps, write_layers, write_trace
from .toymodel import SceneSpec

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_GAMMAS = (0.5, 1.0, 2.0)
DEFAULT_LAMBDAS = (0.5, 1.0, 2.0)


class ConfigError(OffsetLabError):
    """Unreadable or invalid configuration; maps to exit code 2."""


# --- config -------------------------------------------------------------------


def _path(parts) -> str:
    return ".".join(str(p) for p in parts) or "<root>"


def config_from_dict(data: dict) -> RunConfig:
    """Validate ``data`` against the config schema and build a RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    validator = jsonschema.Draft202012Validator(load_schema("config"))
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}")

    top = {k: data[k] for k in ("weights_seed", "latent_seed", "label", "step_size") if k in data}
    if "step_size" in top:
        top["step_size"] = float(top["step_size"])
    model = dict(data.get("model") or {})
    if "weight_scale" in model:
        model["weight_scale"] = float(model["weight_scale"])
    policy = dict(data.get("policy") or {})
    for k in ("gamma", "lambda_spatial", "skip_threshold", "binary_threshold", "norm_decay"):
        if k in policy:
            policy[k] = float(policy[k])
    scene = None
    if data.get("scene") is not None:
        s = dict(data["scene"])
        for k in ("centers", "velocity"):
            if k in s:
                s[k] = tuple(tuple(float(c) for c in pair) for pair in s[k])
        if "radii" in s:
            s["radii"] = tuple(float(r) for r in s["radii"])
        for k in ("move_prob", "noise_scale"):
            if k in s:
                s[k] = float(s[k])
        scene = SceneSpec(**s)
    cfg = RunConfig(**top, model=ModelParams(**model), policy=PolicyConfig(**policy), scene=scene)
    try:
        cfg.validate()
    except BadConfig as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    """Effective config with every field spelled out; re-parses to an equal RunConfig."""
    p = cfg.policy
    policy = asdict(p)
    policy["kind"] = p.kind.value
    policy["mode"] = p.mode.value
    policy["eligible_layers"] = None if p.eligible_layers is None else list(p.eligible_layers)
    scene = None
    if cfg.scene is not None:
        scene = asdict(cfg.scene)
        scene["centers"] = [list(c) for c in cfg.scene.centers]
        scene["velocity"] = [list(v) for v in cfg.scene.velocity]
        scene["radii"] = list(cfg.scene.radii)
    return {
        "schema_version": 1,
        "weights_seed": cfg.weights_seed,
        "latent_seed": cfg.latent_seed,
        "label": cfg.label,
        "step_size": cfg.step_size,
        "model": asdict(cfg.model),
        "policy": policy,
        "scene": scene,
    }


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def parse_policy(spec: str, base: RunConfig) -> RunConfig:
    """``Kind[:key=value[:key=value]]`` applied on top of the base config's policy."""
    kind, *pairs = spec.split(":")
    data = config_to_dict(base)
    data["policy"]["kind"] = kind.strip()
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"policy spec {spec!r}: expected key=value, got {pair!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data["policy"][key.strip()] = value
    return config_from_dict(data)


# --- helpers ------------------------------------------------------------------


def _threads(n_jobs: int) -> int:
    raw = os.environ.get("OFFSETLAB_THREADS")
    if raw is None:
        return max(1, n_jobs)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"OFFSETLAB_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("OFFSETLAB_THREADS must be >= 1")
    return min(value, max(1, n_jobs))


def _parallel(fn: Callable, jobs: list) -> list:
    """Run independent jobs, preserving input order in the results."""
    with ThreadPoolExecutor(max_workers=_threads(len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def _sequence_fidelity(tests: list, refs: list):
    return fidelity_report(
        np.concatenate([tr.final_image for tr in tests]),
        np.concatenate([tr.final_image for tr in refs]),
    )


def _hit_rate(traces: list) -> Optional[float]:
    n = sum(tr.stats.eligible_steps for tr in traces)
    return sum(tr.stats.reuse_weight_sum for tr in traces) / n if n else None


def _float_list(values: Sequence[str]) -> list[float]:
    out = []
    for v in values:
        for part in v.split(","):
            if part.strip():
                out.append(float(part))
    return out


# --- commands -----------------------------------------------------------------


def cmd_run(config_path, out_dir, trace_images: bool = False) -> int:
    cfg = parse_config(config_path)
    out = _outdir(out_dir)
    single = cfg.scene is None
    tests = execute(cfg, record_states=single)
    refs = execute(reference_config(cfg), record_states=single)
    errors = compare_all(tests, refs)
    heatmaps = write_heatmaps(out, tests[0]) if trace_images and single else []
    bundle = build_report(config_to_dict(cfg), cfg.policy.label, tests, cost_summary(tests), errors, heatmaps)
    jsonschema.validate(bundle.to_dict(), load_schema("report"))
    (out / "report.json").write_text(bundle.to_json(), encoding="utf-8")
    write_trace(out / "trace.jsonl", tests)
    write_layers(out / "layers.csv", bundle.layers)
    deviation = errors.layer_deviation
    write_csv(
        out / "steps.csv",
        ["step", "mse", "psnr", "max_layer_deviation"],
        [
            [cfg.model.steps - 1 - k, m, p, max(deviation[k]) if deviation else None]
            for k, (m, p) in enumerate(zip(errors.fidelity.step_mse, errors.fidelity.step_psnr))
        ],
    )
    return EXIT_OK


SWEEP_COLUMNS = ["gamma", "lambda_spatial", "mse_vs_ref", "psnr", "hit_rate", "eval_fraction"]


def cmd_sweep(config_path, gammas, lambdas, out_dir) -> int:
    cfg = parse_config(config_path)
    gammas = list(DEFAULT_GAMMAS if not gammas else gammas)
    lambdas = list(DEFAULT_LAMBDAS if not lambdas else lambdas)
    grid = [(g, ls) for g in gammas for ls in lambdas]
    points = [config_from_dict(_with_policy(cfg, gamma=g, lambda_spatial=ls)) for g, ls in grid]
    out = _outdir(out_dir)
    refs = execute(reference_config(cfg), record_states=False)
    results = _parallel(lambda c: execute(c, record_states=False), points)
    rows = []
    for (g, ls), tests in zip(grid, results):
        fid = _sequence_fidelity(tests, refs)
        rows.append([g, ls, fid.mse, fid.psnr, _hit_rate(tests), cost_summary(tests).eval_fraction])
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return EXIT_OK


def _with_policy(cfg: RunConfig, **changes) -> dict:
    data = config_to_dict(cfg)
    data["policy"].update(changes)
    return data


COMPARE_COLUMNS = [
    "policy",
    "label",
    "mse",
    "psnr",
    "ssim",
    "hit_rate",
    "eval_fraction",
    "block_evals",
    "mean_lambda",
]


def cmd_compare(config_path, policies: Sequence[str], out_dir) -> int:
    cfg = parse_config(config_path)
    if len(policies) < 2:
        raise ConfigError("compare needs at least two policies")
    configs = [parse_policy(p, cfg) for p in policies]
    out = _outdir(out_dir)
    refs = execute(reference_config(cfg), record_states=False)
    results = _parallel(lambda c: execute(c, record_states=False), configs)
    rows = []
    for spec, c, tests in zip(policies, configs, results):
        fid = _sequence_fidelity(tests, refs)
        cost = cost_summary(tests)
        hr = _hit_rate(tests)
        rows.append(
            [spec, c.policy.label, fid.mse, fid.psnr, fid.ssim, hr, cost.eval_fraction,
             cost.total_block_evals, cost.mean_lambda]
        )
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offsetlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one config against its full-recompute reference")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--trace-images", action="store_true", help="also write heatmap_<step>.csv grids")

    sweep = sub.add_parser("sweep", help="grid over gamma and lambda_spatial")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--gamma", nargs="+", default=None, help="values, space or comma separated")
    sweep.add_argument("--lambda", dest="lambdas", nargs="+", default=None)
    sweep.add_argument("--out", required=True)

    compare = sub.add_parser("compare", help="several policies against one shared reference")
    compare.add_argument("--config", required=True)
    compare.add_argument(
        "--policies",
        nargs="+",
        required=True,
        help="Kind[:key=value...], e.g. FullRecompute PureReuse StaticInterval:interval=2 Adaptive",
    )
    compare.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.trace_images)
        if args.command == "sweep":
            try:
                gammas = _float_list(args.gamma or [])
                lambdas = _float_list(args.lambdas or [])
            except ValueError as exc:
                raise ConfigError(f"sweep grid: {exc}") from exc
            return cmd_sweep(args.config, gammas, lambdas, args.out)
        policies = [p for spec in args.policies for p in spec.split(",") if p.strip()]
        return cmd_compare(args.config, policies, args.out)
    except (ConfigError, BadConfig) as exc:
        print(f"offsetlab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, OffsetLabError, ValueError, jsonschema.ValidationError) as exc:
        print(f"offsetlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
