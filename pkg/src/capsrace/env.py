"""Kinematic car, termination, reward and the camera renderer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .track import TrackSpec, _segments_intersect

log = logging.getLogger(__name__)


class SpeedConfig(BaseModel):
    v_min: float = 0.35
    v_max: float = 2.5

    @model_validator(mode="after")
    def _ordered(self):
        if not 0 < self.v_min < self.v_max:
            raise ValueError("speed config requires 0 < v_min < v_max")
        return self


# Desk-scale speed presets; ratios follow the real-world c1/c2/c3 ranges.
SPEED_PRESETS = {
    "c1": SpeedConfig(v_min=0.35, v_max=2.5),
    "c2": SpeedConfig(v_min=0.35, v_max=2.8),
    "c3": SpeedConfig(v_min=1.0, v_max=2.9),
}


class VehicleConfig(BaseModel):
    wheelbase: float = Field(0.26, gt=0)
    steering_limit: float = Field(0.45, gt=0, le=1.5)  # rad
    speed_tau: float = Field(0.25, ge=0)  # s, 0 disables the lag
    steer_tau: float = Field(0.08, ge=0)
    dt: float = Field(1.0 / 30.0, gt=0)


class CameraConfig(BaseModel):
    height: int = Field(40, ge=4)
    width: int = Field(56, ge=4)
    mount_height: float = Field(0.30, gt=0)  # m above ground
    pitch_deg: float = Field(30.0, gt=0, le=90)  # downward tilt
    hfov_deg: float = Field(100.0, gt=0, lt=180)
    max_range: float = Field(5.0, gt=0)  # ground beyond this distance renders as floor
    wall_band: float = Field(0.08, ge=0)  # painted wall width outside the track edge
    track_color: tuple[int, int, int] = (90, 90, 90)
    wall_color: tuple[int, int, int] = (235, 235, 235)
    floor_color: tuple[int, int, int] = (40, 110, 45)
    sky_color: tuple[int, int, int] = (150, 190, 235)


class RewardConfig(BaseModel):
    progress_scale: float = 100.0
    speed_bonus: float = 0.0
    collision_penalty: float = 10.0
    max_episode_steps: int = Field(3000, ge=1)


@dataclass(frozen=True)
class CarState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    steering: float = 0.0
    lap_progress: float = 0.0
    laps_completed: int = 0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class StepResult:
    done: bool = False
    done_reason: str | None = None  # "collision" | "lap_complete" | "timeout"


def _clamp_action(action) -> tuple[float, float]:
    steer, speed = float(action[0]), float(action[1])
    if not (-1.0 <= steer <= 1.0 and -1.0 <= speed <= 1.0):
        log.warning("action %r outside [-1, 1]; clamping", (steer, speed))
        steer = min(1.0, max(-1.0, steer))
        speed = min(1.0, max(-1.0, speed))
    return steer, speed


def _lag(current: float, target: float, dt: float, tau: float) -> float:
    if tau <= 0:
        return target
    return current + (target - current) * (1.0 - math.exp(-dt / tau))


def lap_line_side(track: TrackSpec, point) -> tuple[float, float]:
    """(signed distance along the racing direction, lateral offset) to the lap line."""
    sx, sy, sh = track.start_pose
    dx, dy = point[0] - sx, point[1] - sy
    c, s = math.cos(sh), math.sin(sh)
    return dx * c + dy * s, -dx * s + dy * c


def lap_crossing(track: TrackSpec, p0, p1) -> int:
    """+1 for a forward lap-line crossing on p0->p1, -1 backward, 0 otherwise."""
    f0, l0 = lap_line_side(track, p0)
    f1, l1 = lap_line_side(track, p1)
    if f0 < 0 <= f1:
        direction = 1
    elif f1 < 0 <= f0:
        direction = -1
    else:
        return 0
    lat = l0 + (l1 - l0) * (-f0 / (f1 - f0))
    return direction if abs(lat) <= track.track_width / 2 else 0


def step(state: CarState, action, dt: float, speed_cfg: SpeedConfig,
         vehicle: VehicleConfig | None = None, track: TrackSpec | None = None) -> CarState:
    """Advance the kinematic bicycle by one step.

    The pose integrates with the speed and wheel angle held at the start of the
    step; both then relax toward the commanded targets. When ``track`` is given
    the lap bookkeeping fields are updated as well.
    """
    vehicle = vehicle or VehicleConfig()
    steer_cmd, speed_cmd = _clamp_action(action)
    target_v = speed_cfg.v_min + (speed_cmd + 1.0) / 2.0 * (speed_cfg.v_max - speed_cfg.v_min)
    target_delta = steer_cmd * vehicle.steering_limit

    v = state.speed
    dtheta = v / vehicle.wheelbase * math.tan(state.steering) * dt
    mid = state.heading + 0.5 * dtheta
    x = state.x + v * math.cos(mid) * dt
    y = state.y + v * math.sin(mid) * dt
    heading = state.heading + dtheta

    new_v = max(0.0, _lag(v, target_v, dt, vehicle.speed_tau))
    new_delta = _lag(state.steering, target_delta, dt, vehicle.steer_tau)
    lim = vehicle.steering_limit
    new_delta = min(lim, max(-lim, new_delta))

    nxt = replace(state, x=x, y=y, heading=heading, speed=new_v, steering=new_delta)
    if track is not None:
        laps = state.laps_completed + lap_crossing(track, state.position, nxt.position)
        nxt = replace(nxt, lap_progress=track.lap_progress(nxt.position), laps_completed=laps)
    return nxt


def hits_wall(track: TrackSpec, p0, p1) -> bool:
    a = np.asarray(p0, dtype=np.float64)[None]
    b = np.asarray(p1, dtype=np.float64)[None]
    if np.array_equal(a, b):
        return False
    for wall in track.walls():
        if _segments_intersect(a, b, wall[:-1], wall[1:]).any():
            return True
    return False


def check_termination(track: TrackSpec, prev: CarState, nxt: CarState,
                      step_count: int = 0, max_steps: int | None = None) -> StepResult:
    if hits_wall(track, prev.position, nxt.position):
        return StepResult(True, "collision")
    if nxt.laps_completed >= track.lap_count and nxt.laps_completed > prev.laps_completed:
        return StepResult(True, "lap_complete")
    if max_steps is not None and step_count >= max_steps:
        return StepResult(True, "timeout")
    return StepResult()


def progress_delta(prev: CarState, nxt: CarState, result: StepResult | None = None) -> float:
    """Unwrapped change in lap progress; a finishing step is credited up to the line."""
    if result is not None and result.done_reason == "lap_complete":
        return 1.0 - prev.lap_progress
    d = nxt.lap_progress - prev.lap_progress
    if d >= 0.5:
        d -= 1.0
    elif d < -0.5:
        d += 1.0
    return d


def reward(track: TrackSpec, prev: CarState, nxt: CarState, result: StepResult,
           cfg: RewardConfig, speed_cfg: SpeedConfig) -> float:
    r = progress_delta(prev, nxt, result) * cfg.progress_scale
    r += cfg.speed_bonus * nxt.speed / speed_cfg.v_max
    if result.done_reason == "collision":
        r -= cfg.collision_penalty
    return r


class Renderer:
    """Flat-ground perspective rasteriser for a camera rigidly mounted on the car."""

    def __init__(self, track: TrackSpec, camera: CameraConfig):
        self.track = track
        self.camera = camera
        h, w = camera.height, camera.width
        p = math.radians(camera.pitch_deg)
        focal = math.tan(math.radians(camera.hfov_deg) / 2.0)
        u = (np.arange(w) + 0.5 - w / 2.0) / (w / 2.0) * focal
        v = (h / 2.0 - np.arange(h) - 0.5) / (w / 2.0) * focal
        uu, vv = np.meshgrid(u, v)
        # car frame: x forward, y left, z up; camera right = -y
        fwd = np.array([math.cos(p), 0.0, -math.sin(p)])
        up = np.array([math.sin(p), 0.0, math.cos(p)])
        dx = fwd[0] + vv * up[0]
        dy = -uu
        dz = fwd[2] + vv * up[2]
        ground = dz < 0
        t = np.where(ground, camera.mount_height / np.where(ground, -dz, 1.0), np.inf)
        gx = dx * t
        gy = dy * t
        dist = np.hypot(gx, gy)
        self.sky = ~ground
        self.far = ground & (dist > camera.max_range)
        self.near = ground & ~self.far
        self.gx = gx[self.near]
        self.gy = gy[self.near]
        self._colors = {k: np.array(getattr(camera, k), dtype=np.uint8)
                        for k in ("track_color", "wall_color", "floor_color", "sky_color")}
        self._build_edge_grid()

    def _build_edge_grid(self, cell: float = 0.25):
        """Bucket centerline edges by grid cell.

        Each cell keeps every edge that can lie within the painted distance of
        any point in the cell; farther edges never change a pixel's class.
        """
        track = self.track
        a = track.centerline[:-1]
        d = track.centerline[1:] - a
        len2 = np.einsum("ij,ij->i", d, d)
        paint = track.track_width / 2.0 + self.camera.wall_band
        lo = np.minimum(track.wall_inner.min(axis=0), track.wall_outer.min(axis=0)) - 1.0
        hi = np.maximum(track.wall_inner.max(axis=0), track.wall_outer.max(axis=0)) + 1.0
        nx, ny = np.ceil((hi - lo) / cell).astype(int)
        cx = lo[0] + (np.arange(nx) + 0.5) * cell
        cy = lo[1] + (np.arange(ny) + 0.5) * cell
        centres = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1).reshape(-1, 2)
        rel = centres[:, None, :] - a[None]
        t = np.clip(np.einsum("mij,ij->mi", rel, d) / len2, 0.0, 1.0)
        diff = rel - t[..., None] * d[None]
        dist = np.sqrt(np.einsum("mij,mij->mi", diff, diff))
        keep = dist <= paint + cell * math.sqrt(0.5) + 1e-9
        k = max(1, int(keep.sum(axis=1).max()))
        # padding slots point at a dummy edge far outside the track
        table = np.full((len(centres), k), len(a), dtype=np.int64)
        for i in np.nonzero(keep.any(axis=1))[0]:
            idx = np.nonzero(keep[i])[0]
            table[i, : len(idx)] = idx
        far = hi + 1e3
        self._a = np.vstack([a, far])
        self._d = np.vstack([d, [1.0, 0.0]])
        self._len2 = np.append(len2, 1.0)
        self._table = table
        self._grid_lo = lo
        self._grid_n = (nx, ny)
        self._cell = cell

    def render(self, state: CarState) -> np.ndarray:
        cam = self.camera
        c, s = math.cos(state.heading), math.sin(state.heading)
        wx = state.x + self.gx * c - self.gy * s
        wy = state.y + self.gx * s + self.gy * c
        img = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
        img[self.sky] = self._colors["sky_color"]
        img[self.far] = self._colors["floor_color"]
        ix = np.floor((wx - self._grid_lo[0]) / self._cell).astype(np.int64)
        iy = np.floor((wy - self._grid_lo[1]) / self._cell).astype(np.int64)
        nx, ny = self._grid_n
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        cells = np.where(inside, np.clip(ix, 0, nx - 1) * ny + np.clip(iy, 0, ny - 1), 0)
        edges = self._table[cells]
        edges[~inside] = len(self._a) - 1
        a = self._a[edges]
        d = self._d[edges]
        rx = wx[:, None] - a[..., 0]
        ry = wy[:, None] - a[..., 1]
        t = np.clip((rx * d[..., 0] + ry * d[..., 1]) / self._len2[edges], 0.0, 1.0)
        ex = rx - t * d[..., 0]
        ey = ry - t * d[..., 1]
        dist = np.sqrt(np.min(ex * ex + ey * ey, axis=1))
        half = self.track.track_width / 2.0
        colors = np.where(
            (dist <= half)[:, None], self._colors["track_color"],
            np.where((dist <= half + cam.wall_band)[:, None], self._colors["wall_color"],
                     self._colors["floor_color"]))
        img[self.near] = colors
        return img


def render(track: TrackSpec, state: CarState, camera: CameraConfig) -> np.ndarray:
    return Renderer(track, camera).render(state)


def reset(track: TrackSpec, rng: np.random.Generator | None = None, jitter: float = 0.0,
          heading_jitter: float = 0.0) -> CarState:
    """Car at the start pose, optionally displaced by uniform jitter in the car frame."""
    x, y, h = track.start_pose
    if rng is not None and (jitter > 0 or heading_jitter > 0):
        lon, lat = rng.uniform(-jitter, jitter, size=2)
        dh = rng.uniform(-heading_jitter, heading_jitter)
        x = x + lon * math.cos(h) - lat * math.sin(h)
        y = y + lon * math.sin(h) + lat * math.cos(h)
        h = h + dh
    state = CarState(x=float(x), y=float(y), heading=float(h))
    fwd, _ = lap_line_side(track, state.position)
    # starting behind the lap line means the first crossing only reaches lap 0
    laps = -1 if fwd < 0 else 0
    return replace(state, lap_progress=track.lap_progress(state.position), laps_completed=laps)


class RacingEnv:
    """One episode at a time over a fixed track; returns stacked two-frame observations."""

    def __init__(self, track: TrackSpec, speed: SpeedConfig | None = None,
                 vehicle: VehicleConfig | None = None, camera: CameraConfig | None = None,
                 reward_cfg: RewardConfig | None = None, reset_jitter: float = 0.1,
                 heading_jitter: float = 0.0, frame_transform=None):
        self.track = track
        self.speed = speed or SpeedConfig()
        self.vehicle = vehicle or VehicleConfig()
        self.camera = camera or CameraConfig()
        self.reward_cfg = reward_cfg or RewardConfig()
        self.reset_jitter = reset_jitter
        self.heading_jitter = heading_jitter
        self.frame_transform = frame_transform
        self.renderer = Renderer(track, self.camera)
        self.state: CarState | None = None
        self.steps = 0
        self._prev_frame = None

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.camera.height, self.camera.width, 6)

    def _frame(self) -> np.ndarray:
        frame = self.renderer.render(self.state)
        if self.frame_transform is not None:
            frame = self.frame_transform(frame)
        return frame

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = reset(self.track, rng, self.reset_jitter, self.heading_jitter)
        self.steps = 0
        frame = self._frame()
        self._prev_frame = frame
        return np.concatenate([frame, frame], axis=-1)

    def step(self, action):
        prev = self.state
        nxt = step(prev, action, self.vehicle.dt, self.speed, self.vehicle, self.track)
        self.steps += 1
        result = check_termination(self.track, prev, nxt, self.steps, self.reward_cfg.max_episode_steps)
        r = reward(self.track, prev, nxt, result, self.reward_cfg, self.speed)
        self.state = nxt
        frame = self._frame()
        obs = np.concatenate([frame, self._prev_frame], axis=-1)
        self._prev_frame = frame
        return obs, r, result
