"""Spectral smoothness of action traces and run-level aggregates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_FS = 30.0


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        where = f"{path or '<trace>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class ActionTrace:
    steering: np.ndarray
    speed: np.ndarray
    f_s: float = DEFAULT_FS

    def __post_init__(self):
        self.steering = np.asarray(self.steering, dtype=np.float64)
        self.speed = np.asarray(self.speed, dtype=np.float64)
        if self.f_s <= 0:
            raise ValueError("sampling rate must be positive")
        if self.steering.shape != self.speed.shape:
            raise ValueError("steering and speed series differ in length")

    @classmethod
    def from_actions(cls, actions, f_s: float = DEFAULT_FS) -> "ActionTrace":
        a = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        return cls(a[:, 0], a[:, 1], f_s)

    def __len__(self):
        return len(self.steering)


@dataclass
class SmoothnessReport:
    sm_steering: float
    sm_speed: float
    mean_abs_steering_change: float
    n_samples: int
    n_bins: int = 0
    units: str = "normalized"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunStats:
    runs: int
    completions: int
    completion_rate: float  # percent
    avg_lap_time_s: float  # NaN without completions
    lap_times_s: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = asdict(self)
        if math.isnan(self.avg_lap_time_s):
            d["avg_lap_time_s"] = "NaN"
        return d


def amplitude_spectrum(series, f_s: float = DEFAULT_FS, remove_mean: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One-sided amplitude spectrum without the DC bin: ``(freqs, amplitudes)`` for k = 1..n//2."""
    x = np.asarray(series, dtype=np.float64)
    if remove_mean:
        x = x - x.mean()
    n = len(x)
    if n < 2:
        raise ValueError(f"spectrum needs at least 2 samples, got {n}")
    X = np.fft.rfft(x)[1: n // 2 + 1]
    k = np.arange(1, n // 2 + 1)
    amp = 2.0 / n * np.abs(X)
    if n % 2 == 0:
        amp[-1] = np.abs(X[-1]) / n
    return k * f_s / n, amp


def smoothness_value(series, f_s: float = DEFAULT_FS, remove_mean: bool = False) -> float:
    """Frequency-weighted mean amplitude, normalised by the one-sided bin count."""
    freqs, amp = amplitude_spectrum(series, f_s, remove_mean)
    n_b = len(freqs)
    return float(2.0 / (n_b * f_s) * np.sum(amp * freqs))


def mean_abs_steering_change(trace, steering_limit_deg: float = math.degrees(0.45)) -> float:
    steer = trace.steering if isinstance(trace, ActionTrace) else np.asarray(trace, dtype=np.float64)
    if len(steer) < 2:
        raise ValueError("steering change needs at least 2 samples")
    return float(np.mean(np.abs(np.diff(steer))) * steering_limit_deg)


def smoothness(trace: ActionTrace, steering_limit_deg: float = math.degrees(0.45),
               units: str = "normalized", speed_range: tuple[float, float] | None = None) -> SmoothnessReport:
    """Per-dimension smoothness. ``units="physical"`` maps steering to degrees and speed to m/s."""
    steer, speed = trace.steering, trace.speed
    if units == "physical":
        steer = steer * steering_limit_deg
        if speed_range is not None:
            lo, hi = speed_range
            speed = lo + (speed + 1.0) / 2.0 * (hi - lo)
    elif units != "normalized":
        raise ValueError(f"unknown units {units!r}")
    return SmoothnessReport(
        sm_steering=smoothness_value(steer, trace.f_s),
        sm_speed=smoothness_value(speed, trace.f_s),
        mean_abs_steering_change=mean_abs_steering_change(trace, steering_limit_deg),
        n_samples=len(trace),
        n_bins=len(trace) // 2,
        units=units,
    )


def pooled(reports: list[SmoothnessReport]) -> SmoothnessReport:
    """Equal-weight mean of per-run reports."""
    if not reports:
        raise ValueError("no reports to pool")
    return SmoothnessReport(
        sm_steering=float(np.mean([r.sm_steering for r in reports])),
        sm_speed=float(np.mean([r.sm_speed for r in reports])),
        mean_abs_steering_change=float(np.mean([r.mean_abs_steering_change for r in reports])),
        n_samples=int(sum(r.n_samples for r in reports)),
        n_bins=int(sum(r.n_bins for r in reports)),
        units=reports[0].units,
    )


def aggregate_runs(records, runs: int | None = None) -> RunStats:
    """Completion rate (percent) and mean lap time over completed runs only."""
    records = list(records)
    n = len(records) if runs is None else runs
    if n <= 0:
        raise ValueError("cannot aggregate zero runs")
    laps = [float(r["lap_time_s"]) for r in records if r.get("done_reason") == "lap_complete"]
    avg = float(np.mean(laps)) if laps else float("nan")
    return RunStats(n, len(laps), 100.0 * len(laps) / n, avg, laps)


def write_trace_csv(trace: ActionTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "steering", "speed"])
        for i, (s, v) in enumerate(zip(trace.steering, trace.speed)):
            w.writerow([repr(i / trace.f_s), repr(float(s)), repr(float(v))])


def read_trace_csv(path, f_s: float | None = None) -> ActionTrace:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["t", "steering", "speed"]:
        raise TraceFormatError("expected header 't,steering,speed'", 1, path)
    t, steer, speed = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise TraceFormatError(f"expected 3 fields, got {len(row)}", lineno, path)
        try:
            t.append(float(row[0]))
            steer.append(float(row[1]))
            speed.append(float(row[2]))
        except ValueError as exc:
            raise TraceFormatError(str(exc), lineno, path) from None
    if len(t) < 2:
        raise TraceFormatError("trace has fewer than 2 samples", len(rows), path)
    if f_s is None:
        dt = t[1] - t[0]
        f_s = 1.0 / dt if dt > 0 else DEFAULT_FS
        f_s = round(f_s, 9)
    return ActionTrace(np.array(steer), np.array(speed), f_s)
