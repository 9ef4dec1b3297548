"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import augment, metrics, nets
from .config import (PRESETS, ConfigError, ExperimentConfig, apply_overrides, config_schema, load_config,
                     parse_set_args, preset)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

DEFAULT_SWEEP = (0.5, 0.8, 1.0, 1.3)
ABLATION_LABELS = {
    "brightness": "-brightness",
    "contrast": "-contrast",
    "rotation": "-rotation",
    "salt_pepper": "-salt_pepper",
    "gaussian_blur": "-blur",
    "cutoff": "-cutoff",
}

log = logging.getLogger("capsrace")


class UsageError(ValueError):
    pass


def resolve_config(args, default_preset: str | None = None) -> ExperimentConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise UsageError("give either --config or --preset, not both")
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = preset(getattr(args, "preset", None) or default_preset or "sac_caps")
    overrides = parse_set_args(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides) if overrides else cfg


# experiment matrices

def sweep_cells(base: ExperimentConfig, values=DEFAULT_SWEEP, seeds=None) -> list[tuple[float, int, ExperimentConfig]]:
    """One config per (lambda_T, seed); the spatial term is switched off throughout."""
    values = list(values)
    seeds = list(base.sweep.seeds if seeds is None else seeds)
    if not values or not seeds:
        raise UsageError("sweep needs at least one value and one seed")
    return [(v, s, apply_overrides(base, {"caps.lambda_T": v, "caps.lambda_S": 0.0, "seed": s,
                                          "name": f"{base.name}_lt{v:g}_s{s}"}))
            for v in values for s in seeds]


def ablation_configs(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """Full perturbation set plus each leave-one-out variant, in a fixed order."""
    enabled = list(base.perturbation.phi_enabled)
    if sorted(enabled) != sorted(augment.PHI_KINDS):
        raise UsageError("ablation base must enable all six perturbation kinds")
    out = {"full": base}
    for kind in augment.PHI_KINDS:
        rest = [k for k in enabled if k != kind]
        out[ABLATION_LABELS[kind]] = apply_overrides(base, {"perturbation.phi_enabled": rest,
                                                            "name": f"{base.name}{ABLATION_LABELS[kind]}"})
    return out


def final_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.bin"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return ckpts[-1]


def run_cell(cfg_json: str, cell_dir: str) -> dict:
    """Train then evaluate one config; failures are returned, not raised."""
    from .evaluation import evaluate
    from .training import run_training

    cfg = ExperimentConfig.model_validate_json(cfg_json)
    out = Path(cell_dir)
    try:
        run_training(cfg, out / "train")
        res = evaluate(cfg, final_checkpoint(out / "train"), out_dir=out / "eval")
        return {"ok": True, "sm_steering": res.pooled.sm_steering if res.pooled else None,
                "sm_speed": res.pooled.sm_speed if res.pooled else None,
                "completion": res.stats.completion_rate, "lap_time": res.stats.avg_lap_time_s}
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the matrix
        (out / "error.txt").parent.mkdir(parents=True, exist_ok=True)
        (out / "error.txt").write_text(traceback.format_exc())
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def run_cells(jobs: list[tuple[ExperimentConfig, Path]], workers: int = 1) -> list[dict]:
    args = [(c.model_dump_json(), str(d)) for c, d in jobs]
    if workers <= 1:
        return [run_cell(*a) for a in args]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(run_cell, *zip(*args)))


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else float("nan")


def aggregate_cells(cells: list[dict], key: str) -> list[dict]:
    groups: dict = {}
    for c in cells:
        groups.setdefault(c[key], []).append(c)
    rows = []
    for k, group in groups.items():
        ok = [c for c in group if c["ok"]]
        rows.append({"label": str(k), "cells": len(group), "failed": len(group) - len(ok),
                     "sm_steering": _mean([c["sm_steering"] for c in ok]),
                     "sm_speed": _mean([c["sm_speed"] for c in ok]),
                     "completion": _mean([c["completion"] for c in ok]),
                     "lap_time": _mean([c["lap_time"] for c in ok])})
    return rows


def write_matrix_report(out: Path, title: str, axis: str, cells: list[dict], rows: list[dict]) -> None:
    from .evaluation import markdown_table

    out.mkdir(parents=True, exist_ok=True)

    def clean(d):
        return {k: ("NaN" if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    (out / "report.json").write_text(json.dumps({"cells": [clean(c) for c in cells],
                                                 "rows": [clean(r) for r in rows]}, indent=2))
    cols = [(axis, "label"), ("S_m steering", "sm_steering"), ("S_m speed", "sm_speed"),
            ("Completion (%)", "completion"), ("Avg lap time (s)", "lap_time")]
    cell_rows = [{**c, "label": f"{c[axis]} / seed {c['seed']}" + ("" if c["ok"] else " (FAILED)")} for c in cells]
    text = f"# {title}\n\n## Means over seeds\n\n" + markdown_table(rows, cols)
    text += "\n## Cells\n\n" + markdown_table(cell_rows, cols)
    (out / "report.md").write_text(text)


# subcommands

def cmd_train(args) -> int:
    from .training import run_training

    cfg = resolve_config(args)
    out = Path(args.out or f"runs/{cfg.name}_seed{cfg.seed}")
    result = run_training(cfg, out)
    print(json.dumps(result.as_dict(), indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    if args.runs is not None and args.runs < 1:
        raise UsageError(f"--runs must be >= 1, got {args.runs}")
    if args.run_dir:
        cfg = load_config(Path(args.run_dir) / "config.json")
        overrides = parse_set_args(args.set)
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        ckpt = Path(args.checkpoint) if args.checkpoint else final_checkpoint(args.run_dir)
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint or --run-dir")
        cfg = resolve_config(args)
        ckpt = Path(args.checkpoint)
    if args.speed is not None and args.speed not in ("c1", "c2", "c3"):
        raise UsageError(f"unknown speed preset {args.speed!r}")
    out = Path(args.out or (Path(args.run_dir) / "eval" if args.run_dir else "eval"))
    try:
        res = evaluate(cfg, ckpt, args.runs, args.speed, args.seed, out, args.units, args.plots)
    except nets.ParamFileError as exc:
        raise UsageError(str(exc)) from None
    print((out / "summary.md").read_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = resolve_config(args, "lambda_sweep")
    values = args.values if args.values else DEFAULT_SWEEP
    cells_cfg = sweep_cells(base, values, args.seeds)
    out = Path(args.out or f"runs/sweep_{base.name}")
    jobs = [(c, out / f"lt{v:g}_seed{s}") for v, s, c in cells_cfg]
    results = run_cells(jobs, args.jobs)
    cells = [{"lambda_T": v, "seed": s, **r} for (v, s, _), r in zip(cells_cfg, results)]
    rows = aggregate_cells(cells, "lambda_T")
    write_matrix_report(out, "Temporal weight sensitivity (spatial term off)", "lambda_T", cells, rows)
    print((out / "report.md").read_text())
    return EXIT_OK if all(c["ok"] for c in cells) else EXIT_RUNTIME


def cmd_ablate_phi(args) -> int:
    base = resolve_config(args, "spatial_ablation")
    seeds = args.seeds or base.sweep.seeds
    variants = ablation_configs(base)
    out = Path(args.out or f"runs/ablate_{base.name}")
    plan = [(label, s, apply_overrides(c, {"seed": s})) for label, c in variants.items() for s in seeds]
    jobs = [(c, out / f"{label.lstrip('-') if label != 'full' else 'full'}_seed{s}") for label, s, c in plan]
    results = run_cells(jobs, args.jobs)
    cells = [{"config": label, "seed": s, **r} for (label, s, _), r in zip(plan, results)]
    rows = aggregate_cells(cells, "config")
    write_matrix_report(out, "Leave-one-out perturbation ablation", "config", cells, rows)
    print((out / "report.md").read_text())
    return EXIT_OK if all(c["ok"] for c in cells) else EXIT_RUNTIME


def cmd_analyze(args) -> int:
    from .evaluation import analyze

    for p in args.paths:
        if not Path(p).exists():
            raise UsageError(f"{p} does not exist")
    limit = math.degrees(args.steering_limit)
    result = analyze(args.paths, args.out, args.units, limit, args.plots)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_render_augment_sheet(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .env import render, reset
    from .training import load_experiment_track

    cfg = resolve_config(args)
    track = load_experiment_track(cfg)
    frame = render(track, reset(track), cfg.camera)
    sheet = augment.contact_sheet(frame, cfg.perturbation, np.random.default_rng(cfg.seed), args.samples)
    out = Path(args.out or "augment_sheet.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(out, sheet)
    print(f"rows: {', '.join(augment.KINDS)}\nwrote {out}")
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsrace", description="Smoothness-regularised SAC on a 2D racing simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="deterministic evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--run-dir", help="training run directory (uses its config snapshot and last checkpoint)")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--speed", help="speed preset c1, c2 or c3")
    sp.add_argument("--units", choices=["normalized", "physical"], default="normalized")
    sp.add_argument("--plots", action="store_true", help="also write SVG plots")
    sp.set_defaults(fn=cmd_evaluate)

    for name, fn, helptext in (("sweep", cmd_sweep, "temporal-weight sensitivity sweep"),
                               ("ablate-phi", cmd_ablate_phi, "leave-one-out perturbation ablation")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, seed=False)
        if name == "sweep":
            sp.add_argument("--values", type=float, nargs="+")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--jobs", type=int, default=1, help="parallel cell processes")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("analyze", help="re-analyse trace CSVs, episode JSONL or evaluation directories")
    sp.add_argument("paths", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--units", choices=["normalized", "physical"], default="normalized")
    sp.add_argument("--steering-limit", type=float, default=0.45, help="rad")
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("render-augment-sheet", help="contact sheet of every perturbation kind")
    common(sp)
    sp.add_argument("--samples", type=int, default=4)
    sp.set_defaults(fn=cmd_render_augment_sheet)

    sp = sub.add_parser("schema", help="print the config JSON schema")
    sp.set_defaults(fn=cmd_schema)
    sp = sub.add_parser("presets", help="list preset names")
    sp.set_defaults(fn=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError, augment.AugmentConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except metrics.TraceFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
