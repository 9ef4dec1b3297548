import json

import numpy as np
import pytest

from capsrace.nets import ArchConfig
from capsrace.track import default_track, load_track

OVAL = {
    "track_width": 1.0,
    "segments": [
        {"kind": "straight", "length": 30.0},
        {"kind": "arc", "radius": 5.0, "sweep_deg": 180, "direction": "left"},
        {"kind": "straight", "length": 30.0},
        {"kind": "arc", "radius": 5.0, "sweep_deg": 180, "direction": "left"},
    ],
    "start_offset": 15.0,
    "lap_count": 1,
}


@pytest.fixture(scope="session")
def track():
    return default_track()


@pytest.fixture(scope="session")
def oval():
    return load_track(json.dumps(OVAL))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return ArchConfig(conv=[(3, 2, 4)], hidden=8)


@pytest.fixture
def tiny_arch64():
    return ArchConfig(conv=[(3, 2, 3)], hidden=6, dtype="float64")
