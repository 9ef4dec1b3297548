import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsrace import env as E
from capsrace.env import (CameraConfig, CarState, RacingEnv, RewardConfig, SpeedConfig, StepResult,
                          VehicleConfig)

NO_LAG = VehicleConfig(speed_tau=0.0, steer_tau=0.0)
SPEED = SpeedConfig()


def fit_circle(pts):
    # algebraic least-squares circle: x^2 + y^2 + Dx + Ey + F = 0
    A = np.c_[pts[:, 0], pts[:, 1], np.ones(len(pts))]
    b = -(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    D, Ee, F = np.linalg.lstsq(A, b, rcond=None)[0]
    return math.sqrt(D * D / 4 + Ee * Ee / 4 - F)


def test_zero_speed_does_not_move():
    s = CarState(1.0, 2.0, 0.3, speed=0.0, steering=0.2)
    n = E.step(s, (0.7, -0.2), 1 / 30, SPEED)
    assert (n.x, n.y, n.heading) == (1.0, 2.0, 0.3)


def test_straight_line_motion():
    v, dt = 1.7, 1 / 30
    s = CarState(0.0, 0.0, 0.0, speed=v)
    cmd = 2 * (v - SPEED.v_min) / (SPEED.v_max - SPEED.v_min) - 1
    n = E.step(s, (0.0, cmd), dt, SPEED, NO_LAG)
    assert n.x == pytest.approx(v * dt, abs=1e-15) and n.y == 0.0
    assert n.speed == pytest.approx(v)


@pytest.mark.parametrize("frac", [0.3, 0.6, 1.0])
def test_constant_steering_traces_bicycle_circle(frac):
    veh = NO_LAG
    delta = frac * veh.steering_limit
    v = 1.0
    cmd = 2 * (v - SPEED.v_min) / (SPEED.v_max - SPEED.v_min) - 1
    s = CarState(0.0, 0.0, 0.0, speed=v, steering=delta)
    pts = []
    for _ in range(400):
        s = E.step(s, (frac, cmd), 1 / 30, SPEED, veh)
        pts.append(s.position)
    r = fit_circle(np.array(pts))
    assert r == pytest.approx(veh.wheelbase / math.tan(delta), rel=0.01)


def test_first_order_lag_is_exact_exponential():
    veh = VehicleConfig()
    s = CarState(0.0, 0.0, 0.0)
    n = E.step(s, (1.0, 1.0), veh.dt, SPEED, veh)
    assert n.speed == pytest.approx(SPEED.v_max * (1 - math.exp(-veh.dt / veh.speed_tau)), rel=1e-12)
    assert n.steering == pytest.approx(veh.steering_limit * (1 - math.exp(-veh.dt / veh.steer_tau)), rel=1e-12)


def test_out_of_range_action_is_clamped_with_warning(caplog):
    s = CarState(0.0, 0.0, 0.0)
    with caplog.at_level("WARNING"):
        a = E.step(s, (5.0, -3.0), 1 / 30, SPEED, NO_LAG)
    b = E.step(s, (1.0, -1.0), 1 / 30, SPEED, NO_LAG)
    assert a == b
    assert "clamping" in caplog.text


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 3), st.floats(-0.45, 0.45))
def test_state_invariants_hold(steer, speed, v, delta):
    n = E.step(CarState(0.0, 0.0, 0.0, speed=v, steering=delta), (steer, speed), 1 / 30, SPEED)
    assert n.speed >= 0 and abs(n.steering) <= 0.45 + 1e-12


def test_far_outside_is_collision(track):
    prev = E.reset(track)
    nxt = replace(prev, x=prev.x, y=prev.y + 50.0)
    assert E.check_termination(track, prev, nxt) == StepResult(True, "collision")


def test_stationary_inside_no_termination(track):
    s = E.reset(track)
    assert E.check_termination(track, s, s) == StepResult(False, None)


def test_backward_lap_line_crossing_is_not_a_lap(track):
    x, y, _ = track.start_pose
    prev = CarState(x + 0.05, y, 0.0, laps_completed=0)
    nxt = E.step(prev, (0, 0), 1 / 30, SPEED, track=track)  # stationary bookkeeping
    back = replace(prev, x=x - 0.05)
    assert E.lap_crossing(track, prev.position, back.position) == -1
    moved = replace(back, laps_completed=prev.laps_completed - 1)
    assert not E.check_termination(track, prev, moved).done
    assert nxt.laps_completed == 0


def test_forward_crossing_completes_lap(track):
    x, y, _ = track.start_pose
    prev = CarState(x - 0.05, y, 0.0, laps_completed=0)
    nxt = replace(prev, x=x + 0.05, laps_completed=1)
    assert E.check_termination(track, prev, nxt) == StepResult(True, "lap_complete")


def test_collision_takes_precedence_over_lap(track):
    x, y, _ = track.start_pose
    half = track.track_width / 2
    prev = CarState(x - 0.01, y + half - 0.05, 0.0, laps_completed=0)
    nxt_pos = (x + 0.2, y + half + 0.3)
    assert E.lap_crossing(track, prev.position, nxt_pos) == 1
    nxt = replace(prev, x=nxt_pos[0], y=nxt_pos[1], laps_completed=1)
    assert E.check_termination(track, prev, nxt).done_reason == "collision"


def test_timeout():
    from capsrace.track import default_track

    t = default_track()
    s = E.reset(t)
    assert E.check_termination(t, s, s, step_count=10, max_steps=10) == StepResult(True, "timeout")
    assert not E.check_termination(t, s, s, step_count=9, max_steps=10).done


def test_reward_zero_without_motion(track):
    s = E.reset(track)
    assert E.reward(track, s, s, StepResult(), RewardConfig(speed_bonus=0.0), SPEED) == 0.0


def test_reward_collision_only(track):
    s = E.reset(track)
    cfg = RewardConfig(collision_penalty=1.0, speed_bonus=0.0)
    assert E.reward(track, s, s, StepResult(True, "collision"), cfg, SPEED) == -1.0


def test_reward_speed_bonus(track):
    s = replace(E.reset(track), speed=1.25)
    cfg = RewardConfig(speed_bonus=2.0)
    assert E.reward(track, s, s, StepResult(), cfg, SPEED) == pytest.approx(2.0 * 1.25 / SPEED.v_max)


def pursuit_action(track, state, lookahead=0.6, speed_cmd=0.0, wheelbase=0.26, limit=0.45):
    """Pure pursuit on the centerline, target interpolated at arc length s + lookahead."""
    s_target = (track.progress_s(state.position) + lookahead) % track.length
    cum = track.cum_length
    k = int(np.searchsorted(cum, s_target, side="right") - 1)
    k = min(k, len(cum) - 2)
    t = (s_target - cum[k]) / (cum[k + 1] - cum[k])
    p = track.centerline[k] + t * (track.centerline[k + 1] - track.centerline[k])
    dx, dy = p[0] - state.x, p[1] - state.y
    alpha = math.atan2(dy, dx) - state.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    delta = math.atan2(2 * wheelbase * math.sin(alpha), lookahead)
    return (float(np.clip(delta / limit, -1, 1)), speed_cmd)


def drive_lap(track, reward_cfg=None, max_steps=4000):
    env = RacingEnv(track, reward_cfg=reward_cfg or RewardConfig(), reset_jitter=0.0)
    env.reset()
    total, result = 0.0, None
    deltas = []
    for _ in range(max_steps):
        prev = env.state
        _, r, result = env.step(pursuit_action(track, env.state))
        deltas.append(E.progress_delta(prev, env.state, result))
        total += r
        if result.done:
            break
    return total, result, deltas, env


def test_full_lap_reward_telescopes(track):
    total, result, deltas, _ = drive_lap(track)
    assert result.done_reason == "lap_complete"
    assert total == pytest.approx(100.0, abs=1e-6)
    assert sum(deltas) == pytest.approx(1.0, abs=1e-6)


def test_lap_progress_strictly_increases_on_a_clean_lap(track):
    _, result, deltas, _ = drive_lap(track)
    assert result.done_reason == "lap_complete"
    assert min(deltas[5:]) > 0  # the first frames are spent accelerating from rest


def test_render_mirror_symmetric_on_straight(oval):
    img = E.render(oval, E.reset(oval), CameraConfig())
    diff = np.abs(img.astype(int) - img[:, ::-1].astype(int))
    assert diff.max() <= 1


def test_render_deterministic(track):
    s = E.reset(track)
    a = E.render(track, s, CameraConfig())
    b = E.render(track, s, CameraConfig())
    assert np.array_equal(a, b) and a.dtype == np.uint8 and a.shape == (40, 56, 3)


def test_render_straight_down_is_uniform_track(oval):
    cam = CameraConfig(pitch_deg=90.0, hfov_deg=60.0)
    img = E.render(oval, E.reset(oval), cam)
    assert np.all(img == np.array(cam.track_color, dtype=np.uint8))


def test_render_does_not_touch_state(track):
    env_a = RacingEnv(track, reset_jitter=0.0)
    env_b = RacingEnv(track, reset_jitter=0.0)
    env_a.reset()
    env_b.reset()
    for i in range(20):
        a = (math.sin(i), 0.5)
        env_b.renderer.render(env_b.state)
        env_b.renderer.render(env_b.state)
        oa, ra, _ = env_a.step(a)
        ob, rb, _ = env_b.step(a)
        assert env_a.state == env_b.state and ra == rb and np.array_equal(oa, ob)


def test_reset_without_jitter_is_start_pose(track):
    s = E.reset(track, np.random.default_rng(0), jitter=0.0)
    assert (s.x, s.y, s.heading) == tuple(track.start_pose)


def test_reset_same_seed_same_state(track):
    a = E.reset(track, np.random.default_rng(3), jitter=0.1, heading_jitter=0.05)
    b = E.reset(track, np.random.default_rng(3), jitter=0.1, heading_jitter=0.05)
    assert a == b


def test_reset_jitter_bounds(track):
    rng = np.random.default_rng(0)
    x0, y0, h = track.start_pose
    for _ in range(1000):
        s = E.reset(track, rng, jitter=0.1)
        lon = (s.x - x0) * math.cos(h) + (s.y - y0) * math.sin(h)
        lat = -(s.x - x0) * math.sin(h) + (s.y - y0) * math.cos(h)
        assert abs(lon) <= 0.1 + 1e-12 and abs(lat) <= 0.1 + 1e-12


def test_initial_observation_duplicates_first_frame(track):
    env = RacingEnv(track)
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (40, 56, 6)
    assert np.array_equal(obs[..., :3], obs[..., 3:])


def test_episode_is_deterministic(track):
    def run():
        env = RacingEnv(track)
        env.reset(np.random.default_rng(9))
        out = []
        for i in range(60):
            obs, r, res = env.step((0.3 * math.cos(i / 5), 0.2))
            out.append((env.state, r, res, obs.tobytes()))
        return out

    assert run() == run()


def test_speed_config_validation():
    with pytest.raises(ValueError):
        SpeedConfig(v_min=2.0, v_max=1.0)
    with pytest.raises(ValueError):
        SpeedConfig(v_min=0.0, v_max=1.0)
