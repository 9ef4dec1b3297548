"""Track geometry: segment composition, wall polylines and centerline progress."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

CLOSURE_TOL = 1e-6
# Angular resolution used to discretise arcs into polyline edges.
ARC_STEP_RAD = math.radians(2.0)


class TrackError(ValueError):
    """Raised for malformed or geometrically invalid track files."""

    def __init__(self, message: str, segment_index: int | None = None):
        self.segment_index = segment_index
        if segment_index is not None:
            message = f"segment {segment_index}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Straight:
    length: float
    kind: str = "straight"


@dataclass(frozen=True)
class Arc:
    radius: float
    sweep: float  # radians, > 0
    direction: str  # "left" | "right"
    kind: str = "arc"

    @property
    def signed_sweep(self) -> float:
        return self.sweep if self.direction == "left" else -self.sweep


@dataclass
class TrackSpec:
    segments: list
    track_width: float
    centerline: np.ndarray  # (N+1, 2) closed: last == first
    headings: np.ndarray  # tangent heading at each centerline vertex
    vertex_segment: np.ndarray  # owning segment index for each edge
    wall_inner: np.ndarray  # (N+1, 2) closed polyline
    wall_outer: np.ndarray
    start_pose: tuple  # (x, y, heading)
    start_offset: float
    lap_line: np.ndarray  # (2, 2) endpoints
    lap_count: int = 1
    cum_length: np.ndarray = field(default=None)  # arc length at each vertex

    @property
    def length(self) -> float:
        return float(self.cum_length[-1])

    @property
    def start_s(self) -> float:
        return self.start_offset % self.length

    def walls(self) -> list[np.ndarray]:
        return [self.wall_inner, self.wall_outer]

    def inventory(self) -> dict:
        """Count the corner classes formed by the segment composition."""
        counts = {"straights": 0, "square_corners": 0, "hairpins": 0, "s_curves": 0}
        segs = self.segments
        i = 0
        while i < len(segs):
            seg = segs[i]
            if isinstance(seg, Straight):
                counts["straights"] += 1
            elif math.isclose(seg.sweep, math.pi / 2, abs_tol=1e-9):
                counts["square_corners"] += 1
            elif math.isclose(seg.sweep, math.pi, abs_tol=1e-9):
                counts["hairpins"] += 1
            elif i + 1 < len(segs) and isinstance(segs[i + 1], Arc):
                nxt = segs[i + 1]
                if nxt.direction != seg.direction and math.isclose(nxt.sweep, seg.sweep, abs_tol=1e-9):
                    counts["s_curves"] += 1
                    i += 1
            i += 1
        return counts

    def progress_s(self, point) -> float:
        """Arc length of the closest centerline point to ``point``."""
        p = np.asarray(point, dtype=np.float64)
        a = self.centerline[:-1]
        d = self.centerline[1:] - a
        seg_len2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
        proj = a + t[:, None] * d
        dist2 = np.einsum("ij,ij->i", proj - p, proj - p)
        k = int(np.argmin(dist2))
        return float(self.cum_length[k] + t[k] * math.sqrt(seg_len2[k]))

    def lap_progress(self, point) -> float:
        return ((self.progress_s(point) - self.start_s) / self.length) % 1.0

    def centerline_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each of ``points`` (M, 2) to the centerline."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        a = self.centerline[:-1]
        d = self.centerline[1:] - a
        seg_len2 = np.einsum("ij,ij->i", d, d)
        rel = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("mij,ij->mi", rel, d) / seg_len2, 0.0, 1.0)
        diff = rel - t[..., None] * d[None]
        return np.sqrt(np.min(np.einsum("mij,mij->mi", diff, diff), axis=1))


def parse_segments(raw: list) -> list:
    segments = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "kind" not in item:
            raise TrackError("segment must be an object with a 'kind' field", i)
        kind = item["kind"]
        try:
            if kind == "straight":
                length = float(item["length"])
                if not length > 0:
                    raise TrackError("straight length must be positive", i)
                segments.append(Straight(length))
            elif kind == "arc":
                radius = float(item["radius"])
                sweep = math.radians(float(item["sweep_deg"]))
                direction = item.get("direction", "left")
                if not radius > 0:
                    raise TrackError("arc radius must be positive", i)
                if not sweep > 0:
                    raise TrackError("arc sweep_deg must be positive", i)
                if direction not in ("left", "right"):
                    raise TrackError(f"arc direction must be 'left' or 'right', got {direction!r}", i)
                segments.append(Arc(radius, sweep, direction))
            else:
                raise TrackError(f"unknown segment kind {kind!r}", i)
        except KeyError as exc:
            raise TrackError(f"missing field {exc.args[0]!r}", i) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TrackError):
                raise
            raise TrackError(f"malformed field: {exc}", i) from None
    if not segments:
        raise TrackError("track has no segments")
    return segments


def trace_centerline(segments: list):
    """Walk the segments from the origin heading +x.

    Returns vertices, vertex headings, owning segment per edge, and the exact
    analytic end pose.
    """
    x, y, th = 0.0, 0.0, 0.0
    pts = [(x, y)]
    heads = [th]
    owner = []
    for i, seg in enumerate(segments):
        if isinstance(seg, Straight):
            x1 = x + seg.length * math.cos(th)
            y1 = y + seg.length * math.sin(th)
            pts.append((x1, y1))
            heads.append(th)
            owner.append(i)
            x, y = x1, y1
        else:
            sgn = 1.0 if seg.direction == "left" else -1.0
            # circle centre lies on the turning side
            cx = x - sgn * seg.radius * math.sin(th)
            cy = y + sgn * seg.radius * math.cos(th)
            n = max(1, math.ceil(seg.sweep / ARC_STEP_RAD))
            phi0 = th - sgn * math.pi / 2
            for k in range(1, n + 1):
                phi = phi0 + sgn * seg.sweep * k / n
                pts.append((cx + seg.radius * math.cos(phi), cy + seg.radius * math.sin(phi)))
                heads.append(th + sgn * seg.sweep * k / n)
                owner.append(i)
            th = th + sgn * seg.sweep
            x, y = pts[-1]
    return np.array(pts), np.array(heads), np.array(owner, dtype=np.int64), (x, y, th)


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Vectorised proper/touching intersection test of segment sets."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0) & ~((d1 == 0) & (d2 == 0) & (d3 == 0) & (d4 == 0))


def polyline_self_intersections(poly: np.ndarray) -> list[tuple[int, int]]:
    """Pairs of non-adjacent edges of a closed polyline that intersect."""
    a = poly[:-1]
    b = poly[1:]
    n = len(a)
    hits = []
    for i in range(n):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if len(j) == 0:
            continue
        mask = _segments_intersect(a[i][None], b[i][None], a[j], b[j])
        for jj in j[mask]:
            hits.append((i, int(jj)))
    return hits


def _point_in_polygon(pt, poly) -> bool:
    x, y = pt
    a = poly[:-1]
    b = poly[1:]
    cond = (a[:, 1] > y) != (b[:, 1] > y)
    xs = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / np.where(cond, b[:, 1] - a[:, 1], 1.0)
    return bool(np.count_nonzero(cond & (x < xs)) % 2)


def build_track(segments: list, track_width: float, start_offset: float = 0.0, lap_count: int = 1) -> TrackSpec:
    if not track_width > 0:
        raise TrackError("track_width must be positive")
    if lap_count < 1:
        raise TrackError("lap_count must be >= 1")
    pts, heads, owner, (ex, ey, eth) = trace_centerline(segments)
    last = len(segments) - 1
    if math.hypot(ex, ey) > CLOSURE_TOL:
        raise TrackError(f"loop not closed: end point ({ex:.6g}, {ey:.6g}) != start (0, 0)", last)
    turn = eth / (2 * math.pi)
    if abs(turn - round(turn)) * 2 * math.pi > CLOSURE_TOL or round(turn) == 0:
        raise TrackError(f"loop not closed: end heading {math.degrees(eth):.6g} deg", last)
    pts[-1] = pts[0]

    half = track_width / 2.0
    normal_left = np.stack([-np.sin(heads), np.cos(heads)], axis=1)
    left = pts + half * normal_left
    right = pts - half * normal_left
    left[-1] = left[0]
    right[-1] = right[0]
    # a counter-clockwise loop (net turn +2pi) has its inner wall on the left
    if eth > 0:
        inner, outer = left, right
    else:
        inner, outer = right, left

    for name, wall in (("inner", inner), ("outer", outer)):
        hits = polyline_self_intersections(wall)
        if hits:
            i, _ = hits[0]
            raise TrackError(f"{name} wall self-intersects", int(owner[i]))
    cross = _segments_intersect(inner[:-1][:, None], inner[1:][:, None], outer[:-1][None], outer[1:][None])
    if cross.any():
        i = int(np.argwhere(cross)[0][0])
        raise TrackError("inner and outer walls intersect", int(owner[i]))

    edge_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(edge_len)])
    total = cum[-1]
    s0 = start_offset % total
    k = int(np.searchsorted(cum, s0, side="right") - 1)
    k = min(k, len(edge_len) - 1)
    t = (s0 - cum[k]) / edge_len[k]
    sx, sy = pts[k] + t * (pts[k + 1] - pts[k])
    d = pts[k + 1] - pts[k]
    sh = math.atan2(d[1], d[0])
    nrm = np.array([-math.sin(sh), math.cos(sh)])
    centre = np.array([sx, sy])
    lap_line = np.stack([centre + half * nrm, centre - half * nrm])

    track = TrackSpec(
        segments=list(segments),
        track_width=float(track_width),
        centerline=pts,
        headings=heads,
        vertex_segment=owner,
        wall_inner=inner,
        wall_outer=outer,
        start_pose=(float(sx), float(sy), float(sh)),
        start_offset=float(start_offset),
        lap_line=lap_line,
        lap_count=int(lap_count),
        cum_length=cum,
    )
    inside_outer = _point_in_polygon((sx, sy), outer)
    inside_inner = _point_in_polygon((sx, sy), inner)
    if not inside_outer or inside_inner:
        raise TrackError("start pose is not strictly between the walls")
    return track


def load_track(spec_text: str) -> TrackSpec:
    """Parse a JSON track description into a validated :class:`TrackSpec`."""
    try:
        raw = json.loads(spec_text)
    except json.JSONDecodeError as exc:
        raise TrackError(f"malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise TrackError("track file must be a JSON object")
    try:
        width = float(raw["track_width"])
        segments_raw = raw["segments"]
    except KeyError as exc:
        raise TrackError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TrackError(f"malformed field track_width: {exc}") from None
    if not isinstance(segments_raw, list):
        raise TrackError("segments must be a list")
    segments = parse_segments(segments_raw)
    try:
        start_offset = float(raw.get("start_offset", 0.0))
        lap_count = int(raw.get("lap_count", 1))
    except (TypeError, ValueError) as exc:
        raise TrackError(f"malformed field: {exc}") from None
    return build_track(segments, width, start_offset, lap_count)


def load_track_file(path) -> TrackSpec:
    return load_track(Path(path).read_text())


def default_track_text() -> str:
    return resources.files("capsrace.data").joinpath("default_track.json").read_text()


def default_track() -> TrackSpec:
    return load_track(default_track_text())
