import numpy as np
import pytest

from monofusion import synth
from monofusion.geom import Intrinsics
from monofusion.volume import GridSpec

# Slab mid-planes sit on voxel-center planes (odd multiples of 0.02 m) so a
# 2 cm slab always contains interior sample points at the 4 cm grid. The
# floor is one truncation band thick (0.12 m), which stops either side's
# integration band from punching through and displacing the far face.
ROOM_WALL_HEIGHT = 0.3


def make_room_scene() -> synth.Scene:
    """The acceptance room: 3 walls + floor + 1 box + 1 sphere."""
    rx = synth.rotation_about_axis((1, 0, 0), np.pi / 2)
    rside = synth.rotation_about_axis((0, 0, 1), np.pi / 2) @ rx
    h = ROOM_WALL_HEIGHT
    return synth.Scene(
        [
            synth.box((0, 0, -0.06), (2.4, 2.4, 0.12)),
            synth.plane_rect((0, 0.78, h / 2 - 0.02), 1.6, h, rx),
            synth.plane_rect((-0.78, 0, h / 2 - 0.02), 1.6, h, rside),
            synth.plane_rect((0.78, 0, h / 2 - 0.02), 1.6, h, rside),
            synth.box((-0.3, -0.26, 0.11), (0.22, 0.22, 0.22)),
            synth.sphere((0.32, 0.18, 0.11), 0.11),
        ]
    )


def make_tiny_scene() -> synth.Scene:
    """Small open scene for fast learned-mode runs."""
    return synth.Scene(
        [
            synth.box((0, 0, -0.06), (0.8, 0.8, 0.12)),
            synth.box((-0.1, -0.1, 0.11), (0.22, 0.22, 0.22)),
            synth.sphere((0.15, 0.12, 0.09), 0.09),
        ]
    )


@pytest.fixture(scope="session")
def room_scene():
    return make_room_scene()


@pytest.fixture(scope="session")
def tiny_scene():
    return make_tiny_scene()


@pytest.fixture(scope="session")
def spec():
    return GridSpec.default()


@pytest.fixture
def cam64():
    # principal point on a pixel center so the central ray is exactly on-axis
    return Intrinsics(48.0, 48.0, 32.5, 24.5, 64, 48)


def random_pose(rng) -> "synth.Pose":
    from monofusion.geom import Pose, rotation_about_axis

    axis = rng.normal(size=3)
    angle = rng.uniform(-np.pi, np.pi)
    return Pose(rotation_about_axis(axis, angle), rng.uniform(-2.0, 2.0, size=3))
