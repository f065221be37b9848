import numpy as np
import pytest

from pointsplat.synth import frontal_camera, random_scene


@pytest.fixture
def camera32():
    return frontal_camera(32, 32)


@pytest.fixture
def camera64():
    return frontal_camera(64, 64)


@pytest.fixture
def scene12(camera32):
    return random_scene(7, 12, camera32)


def random_unit_quaternion(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)
