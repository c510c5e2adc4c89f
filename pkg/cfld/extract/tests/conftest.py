import pytest

from cfld.extract.poses import PoseSpec

# arms out, legs together, centred; every bone clear of the others
UPRIGHT = (
    (0.5, 0.18),
    (0.5, 0.30),
    (0.40, 0.30),
    (0.60, 0.30),
    (0.30, 0.42),
    (0.70, 0.42),
    (0.22, 0.52),
    (0.78, 0.52),
    (0.5, 0.58),
    (0.5, 0.88),
)


@pytest.fixture
def upright():
    return PoseSpec(keypoints=UPRIGHT)
