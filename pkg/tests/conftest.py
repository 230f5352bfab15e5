import numpy as np
import pytest

from tagpose.kinematics import default_robot, parse_robot
from tagpose.synth import generate

PLANAR_ARM = """
[joint]
axis = 0 0 1
origin_translation = 0.3 0 0
lower = -3.1
upper = 3.1

[joint]
axis = 0 0 1
origin_translation = 0.25 0 0
lower = -3.1
upper = 3.1

[joint]
axis = 0 0 1
origin_translation = 0.15 0 0
lower = -3.1
upper = 3.1

[keypoint]
link = 0
offset = 0 0 0
[keypoint]
link = 1
offset = 0 0 0
[keypoint]
link = 2
offset = 0 0 0
[keypoint]
link = 3
offset = 0 0 0

[surface_point]
link = 0
offsets = 0 0 0; 0.1 0 0; 0.2 0 0
"""


@pytest.fixture(scope="session")
def robot():
    return default_robot()


@pytest.fixture(scope="session")
def planar_arm():
    return parse_robot(PLANAR_ARM)


@pytest.fixture(scope="session")
def scenes(robot):
    return generate(robot, "in-dist", 6, seed=11)


@pytest.fixture(scope="session")
def ood_scenes(robot):
    return generate(robot, "ood", 6, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
