"""Deterministic-policy evaluation, report files and plots."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, nets
from .config import ExperimentConfig
from .env import RacingEnv
from .training import frame_pipeline, load_experiment_track


@dataclass
class EvalResult:
    stats: metrics.RunStats
    pooled: metrics.SmoothnessReport | None
    per_run: list  # SmoothnessReport | None per run
    episodes: list[dict]
    out_dir: Path | None = None

    def smoothness_dict(self) -> dict:
        return {
            "pooled": self.pooled.as_dict() if self.pooled else None,
            "pooling": "equal-weight mean of per-run values",
            "bins": "one-sided bin count floor(n/2)",
            "per_run": [r.as_dict() if r else None for r in self.per_run],
        }


def run_episode(env: RacingEnv, policy: nets.ParamSet, rng: np.random.Generator, max_steps: int):
    """One deterministic episode; returns the executed actions and the episode record."""
    obs = env.reset(rng)
    actions = []
    ret = 0.0
    result = None
    while True:
        mean, _ = nets.policy_forward(policy, obs)
        action = np.clip(np.tanh(mean.data[0].astype(np.float64)), -1.0, 1.0)
        obs, r, result = env.step(action)
        actions.append(action)
        ret += r
        if result.done or env.steps >= max_steps:
            break
    reason = result.done_reason if result.done else "timeout"
    record = {
        "steps": env.steps,
        "return": ret,
        "done_reason": reason,
        "lap_time_s": env.steps * env.vehicle.dt if reason == "lap_complete" else None,
    }
    return np.array(actions), record


def evaluate(cfg: ExperimentConfig, checkpoint, runs: int | None = None, speed_preset: str | None = None,
             seed: int | None = None, out_dir=None, units: str = "normalized", plots: bool = False) -> EvalResult:
    runs = cfg.evaluation.runs if runs is None else runs
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    speed_preset = speed_preset or cfg.evaluation.speed_preset
    expected = nets.build_networks(cfg.obs_shape, 2, cfg.arch, 0, cfg.sac.alpha_init)
    networks = nets.load_networks(checkpoint, expected)
    track = load_experiment_track(cfg)
    speed = cfg.speed_config(speed_preset)
    env = RacingEnv(track, speed, cfg.vehicle, cfg.camera, cfg.reward,
                    cfg.evaluation.reset_jitter, cfg.evaluation.heading_jitter, frame_pipeline(cfg, None, False))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    limit_deg = math.degrees(cfg.vehicle.steering_limit)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    episodes, per_run = [], []
    for i in range(runs):
        actions, record = run_episode(env, networks.policy, rng, cfg.reward.max_episode_steps)
        trace = metrics.ActionTrace.from_actions(actions, 1.0 / cfg.vehicle.dt)
        record = {"run": i, "speed_preset": speed_preset, **record}
        episodes.append(record)
        rep = metrics.smoothness(trace, limit_deg, units, (speed.v_min, speed.v_max)) if len(trace) >= 2 else None
        per_run.append(rep)
        if out is not None:
            metrics.write_trace_csv(trace, out / "traces" / f"run_{i:03d}.csv")
    valid = [r for r in per_run if r is not None]
    result = EvalResult(metrics.aggregate_runs(episodes, runs), metrics.pooled(valid) if valid else None,
                        per_run, episodes, out)
    if out is not None:
        write_reports(result, out, title=f"{cfg.name} @ {speed_preset}")
        if plots:
            traces = [metrics.read_trace_csv(p) for p in sorted((out / "traces").glob("*.csv"))]
            write_plots(traces, out / "plots")
    return result


def _fmt(x, digits=4):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NaN"
    return f"{x:.{digits}g}"


def markdown_table(rows: list[dict], columns: list[tuple[str, str]]) -> str:
    head = "| " + " | ".join(c for c, _ in columns) + " |"
    sep = "|" + "|".join("---" for _ in columns) + "|"
    body = ["| " + " | ".join(r.get(k, "") if isinstance(r.get(k), str) else _fmt(r.get(k)) for _, k in columns) + " |"
            for r in rows]
    return "\n".join([head, sep, *body]) + "\n"


def summary_row(label: str, stats: metrics.RunStats, pooled: metrics.SmoothnessReport | None) -> dict:
    return {
        "label": label,
        "sm_steering": pooled.sm_steering if pooled else None,
        "sm_speed": pooled.sm_speed if pooled else None,
        "steer_change": pooled.mean_abs_steering_change if pooled else None,
        "completion": stats.completion_rate,
        "lap_time": stats.avg_lap_time_s,
    }


SUMMARY_COLUMNS = [("Model", "label"), ("S_m steering", "sm_steering"), ("S_m speed", "sm_speed"),
                   ("Mean steering change (deg)", "steer_change"), ("Completion (%)", "completion"),
                   ("Avg lap time (s)", "lap_time")]


def write_reports(result: EvalResult, out: Path, title: str = "evaluation") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "smoothness.json").write_text(json.dumps(result.smoothness_dict(), indent=2))
    (out / "run_stats.json").write_text(json.dumps(result.stats.as_dict(), indent=2))
    with open(out / "episodes.jsonl", "w") as fh:
        for rec in result.episodes:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    n = result.pooled.n_samples if result.pooled else 0
    text = (f"# {title}\n\n" + markdown_table([summary_row(title, result.stats, result.pooled)], SUMMARY_COLUMNS)
            + f"\nruns: {result.stats.runs}, samples: {n}, units: "
            + f"{result.pooled.units if result.pooled else 'n/a'}\n")
    (out / "summary.md").write_text(text)


def write_plots(traces: list[metrics.ActionTrace], out: Path) -> list[Path]:
    """Steering/speed time series and spectrum stem plots, one SVG pair per trace."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tr in enumerate(traces):
        t = np.arange(len(tr)) / tr.f_s
        fig, axes = plt.subplots(2, 1, figsize=(7, 4), sharex=True)
        axes[0].plot(t, tr.steering)
        axes[0].set_ylabel("steering")
        axes[1].plot(t, tr.speed)
        axes[1].set_ylabel("speed")
        axes[1].set_xlabel("time (s)")
        p = out / f"trace_{i:03d}.svg"
        fig.savefig(p)
        plt.close(fig)
        paths.append(p)
        if len(tr) >= 2:
            fig, axes = plt.subplots(2, 1, figsize=(7, 4), sharex=True)
            for ax, series, name in ((axes[0], tr.steering, "steering"), (axes[1], tr.speed, "speed")):
                f, m = metrics.amplitude_spectrum(series, tr.f_s)
                ax.stem(f, m)
                ax.set_ylabel(f"|M| {name}")
            axes[1].set_xlabel("frequency (Hz)")
            p = out / f"spectrum_{i:03d}.svg"
            fig.savefig(p)
            plt.close(fig)
            paths.append(p)
    return paths


def analyze(paths, out_dir=None, units: str = "normalized", steering_limit_deg: float = math.degrees(0.45),
            plots: bool = False) -> dict:
    """Recompute smoothness and run statistics from trace CSVs and episode JSONL files alone."""
    traces, records = [], []
    for p in map(Path, paths):
        if p.is_dir():
            traces += [metrics.read_trace_csv(c) for c in sorted(p.glob("traces/*.csv"))]
            if (p / "episodes.jsonl").is_file():
                records += read_jsonl(p / "episodes.jsonl")
        elif p.suffix == ".csv":
            traces.append(metrics.read_trace_csv(p))
        elif p.suffix == ".jsonl":
            records += read_jsonl(p)
        else:
            raise metrics.TraceFormatError(f"unsupported file type {p.suffix!r}", None, p)
    per_run = [metrics.smoothness(t, steering_limit_deg, units) for t in traces]
    result = {
        "smoothness": {"pooled": metrics.pooled(per_run).as_dict() if per_run else None,
                       "per_run": [r.as_dict() for r in per_run]},
        "run_stats": metrics.aggregate_runs(records).as_dict() if records else None,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.json").write_text(json.dumps(result, indent=2))
        row = {"label": "analysis"}
        if per_run:
            pr = metrics.pooled(per_run)
            row.update(sm_steering=pr.sm_steering, sm_speed=pr.sm_speed, steer_change=pr.mean_abs_steering_change)
        if records:
            st = metrics.aggregate_runs(records)
            row.update(completion=st.completion_rate, lap_time=st.avg_lap_time_s)
        (out / "analysis.md").write_text(markdown_table([row], SUMMARY_COLUMNS))
        if plots:
            write_plots(traces, out / "plots")
    return result


def read_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise metrics.TraceFormatError(f"malformed JSON ({exc.msg})", lineno, path) from None
        if not isinstance(rec, dict) or "done_reason" not in rec:
            raise metrics.TraceFormatError("record lacks 'done_reason'", lineno, path)
        out.append(rec)
    return out
