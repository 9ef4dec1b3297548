import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsrace.track import (TrackError, default_track_text, load_track, polyline_self_intersections,
                            trace_centerline, parse_segments)


def track_json(segments, width=1.0, **extra):
    return json.dumps({"track_width": width, "segments": segments, **extra})


def test_open_straight_is_rejected_naming_segment():
    with pytest.raises(TrackError, match="loop not closed") as info:
        load_track(track_json([{"kind": "straight", "length": 10}]))
    assert info.value.segment_index == 0


def test_circle_walls_are_concentric_circles():
    width = 1.0
    t = load_track(track_json([{"kind": "arc", "radius": 5, "sweep_deg": 360, "direction": "left"}], width))
    center = np.array([0.0, 5.0])  # left turn from the origin heading +x
    r_in = np.linalg.norm(t.wall_inner - center, axis=1)
    r_out = np.linalg.norm(t.wall_outer - center, axis=1)
    assert np.ptp(r_in) < 1e-9 and np.ptp(r_out) < 1e-9
    assert np.allclose(sorted([r_in[0], r_out[0]]), [5 - width / 2, 5 + width / 2], atol=1e-9)


def test_default_track_inventory(track):
    assert track.inventory() == {"straights": 2, "square_corners": 2, "hairpins": 3, "s_curves": 1}


def test_default_track_closes(track):
    assert np.linalg.norm(track.centerline[-1] - track.centerline[0]) <= 1e-6


def test_walls_are_simple(track):
    assert polyline_self_intersections(track.wall_inner) == []
    assert polyline_self_intersections(track.wall_outer) == []


def test_start_pose_between_walls(track):
    x, y, _ = track.start_pose
    assert track.centerline_distance(np.array([[x, y]]))[0] < track.track_width / 2


def test_load_is_deterministic():
    a, b = load_track(default_track_text()), load_track(default_track_text())
    assert np.array_equal(a.wall_inner, b.wall_inner) and np.array_equal(a.wall_outer, b.wall_outer)


@pytest.mark.parametrize("segments, index", [
    ([{"kind": "straight", "length": -1}], 0),
    ([{"kind": "straight", "length": 5}, {"kind": "arc", "radius": 1}], 1),
    ([{"kind": "bend", "length": 5}], 0),
])
def test_malformed_segment_names_index(segments, index):
    with pytest.raises(TrackError) as info:
        load_track(track_json(segments))
    assert info.value.segment_index == index


def test_self_intersecting_loop_rejected():
    # figure-eight: two full circles in opposite directions cross at the origin
    segs = [{"kind": "arc", "radius": 3, "sweep_deg": 360, "direction": "left"},
            {"kind": "arc", "radius": 3, "sweep_deg": 360, "direction": "right"}]
    with pytest.raises(TrackError):
        load_track(track_json(segs))


def test_malformed_json():
    with pytest.raises(TrackError, match="malformed"):
        load_track("{not json")


@settings(max_examples=30, deadline=None)
@given(r=st.floats(1.0, 20.0), w=st.floats(0.2, 1.5))
def test_circle_closure_any_radius(r, w):
    t = load_track(track_json([{"kind": "arc", "radius": r, "sweep_deg": 360, "direction": "left"}], w))
    assert math.isclose(t.length, 2 * math.pi * r, rel_tol=1e-3)


def test_trace_centerline_end_pose_of_square():
    segs = parse_segments([{"kind": "straight", "length": 2}, {"kind": "arc", "radius": 1, "sweep_deg": 90,
                                                                  "direction": "left"}])
    _, _, _, end = trace_centerline(segs)
    assert np.allclose(end, (3.0, 1.0, math.pi / 2), atol=1e-12)


@pytest.mark.parametrize("s", [0.0, 0.3, 0.77])
def test_lap_progress_increases_along_centerline(track, s):
    n = len(track.centerline) - 1
    i = int(s * n)
    pts = track.centerline[i: i + 5]
    prog = [track.lap_progress(p) for p in pts]
    diffs = np.diff(prog)
    diffs[diffs < -0.5] += 1.0
    assert np.all(diffs > 0)
