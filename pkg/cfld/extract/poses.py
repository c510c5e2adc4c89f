"""
Stick-person skeletons.

A pose is J=10 keypoints in normalised [0, 1]^2 canvas coordinates (x right, y down) plus a
facing bit. Bone lengths are fixed by the template; joint angles are sampled within
anatomical ranges and the figure is placed uniformly where it fits inside the margin.
"""

import math
from dataclasses import dataclass

import numpy as np

from cfld.numkit.rng import Rng

KEYPOINTS = (
    "head",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hand",
    "right_hand",
    "hip",
    "feet",
)
J = len(KEYPOINTS)
K = {name: index for index, name in enumerate(KEYPOINTS)}

# (parent, child); drawing order for pose maps
BONES = (
    ("neck", "head"),
    ("neck", "left_shoulder"),
    ("neck", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("right_shoulder", "right_elbow"),
    ("left_elbow", "left_hand"),
    ("right_elbow", "right_hand"),
    ("neck", "hip"),
    ("hip", "feet"),
)

BONE_LENGTHS = {
    ("neck", "head"): 0.12,
    ("neck", "left_shoulder"): 0.10,
    ("neck", "right_shoulder"): 0.10,
    ("left_shoulder", "left_elbow"): 0.14,
    ("right_shoulder", "right_elbow"): 0.14,
    ("left_elbow", "left_hand"): 0.13,
    ("right_elbow", "right_hand"): 0.13,
    ("neck", "hip"): 0.28,
    ("hip", "feet"): 0.30,
}

# radians; 0 points straight down, positive turns towards +x
ANGLE_RANGES = {
    "torso": (-0.25, 0.25),
    "head": (-0.35, 0.35),  # relative to straight up
    "left_upper_arm": (-2.6, -0.2),
    "right_upper_arm": (0.2, 2.6),
    "forearm_bend": (-1.2, 1.2),
    "legs": (-0.3, 0.3),
}

MARGIN = 0.05


def _direction(angle: float) -> np.ndarray:
    return np.array([math.sin(angle), math.cos(angle)])


@dataclass(frozen=True)
class PoseSpec:
    keypoints: tuple[tuple[float, float], ...]
    facing_front: bool = True

    def __post_init__(self):
        if len(self.keypoints) != J:
            raise ValueError(f"PoseSpec needs {J} keypoints, got {len(self.keypoints)}")
        points = self.array
        if points.min() < MARGIN - 1e-9 or points.max() > 1.0 - MARGIN + 1e-9:
            raise ValueError(f"Keypoints must stay inside the canvas with margin {MARGIN}")
        for parent, child in BONES:
            if np.allclose(points[K[parent]], points[K[child]]):
                raise ValueError(f"Degenerate pose: bone {parent}-{child} has zero length")

    @property
    def array(self) -> np.ndarray:
        """[J, 2] keypoints as (x, y)."""
        return np.asarray(self.keypoints, dtype=np.float64)

    def point(self, name: str) -> np.ndarray:
        return self.array[K[name]]

    def shifted(self, dx: float, dy: float) -> "PoseSpec":
        return PoseSpec(
            keypoints=tuple((x + dx, y + dy) for x, y in self.keypoints),
            facing_front=self.facing_front,
        )

    def bone_midpoints(self) -> np.ndarray:
        """[len(BONES), 2] midpoints in normalised coordinates."""
        points = self.array
        return np.stack([(points[K[a]] + points[K[b]]) / 2.0 for a, b in BONES])

    def to_dict(self) -> dict:
        return {"keypoints": [list(p) for p in self.keypoints], "facing_front": self.facing_front}


def _uniform(rng: Rng, bounds: tuple[float, float]) -> float:
    low, high = bounds
    return low + (high - low) * rng.uniform()


def sample_pose(rng: Rng) -> PoseSpec:
    """Random pose; every draw comes from `rng` so the result is a function of its stream."""
    torso = _uniform(rng, ANGLE_RANGES["torso"])
    head = _uniform(rng, ANGLE_RANGES["head"])
    arms = {
        "left": (_uniform(rng, ANGLE_RANGES["left_upper_arm"]), _uniform(rng, ANGLE_RANGES["forearm_bend"])),
        "right": (_uniform(rng, ANGLE_RANGES["right_upper_arm"]), _uniform(rng, ANGLE_RANGES["forearm_bend"])),
    }
    legs = torso + _uniform(rng, ANGLE_RANGES["legs"])
    facing_front = rng.uniform() < 0.5

    points = np.zeros((J, 2))
    down = _direction(torso)
    across = np.array([down[1], -down[0]])  # torso-perpendicular, +x when upright
    points[K["head"]] = points[K["neck"]] + _direction(torso + math.pi + head) * BONE_LENGTHS[("neck", "head")]
    points[K["left_shoulder"]] = points[K["neck"]] - across * BONE_LENGTHS[("neck", "left_shoulder")]
    points[K["right_shoulder"]] = points[K["neck"]] + across * BONE_LENGTHS[("neck", "right_shoulder")]
    for side, (upper, bend) in arms.items():
        shoulder = points[K[f"{side}_shoulder"]]
        elbow = shoulder + _direction(upper) * BONE_LENGTHS[(f"{side}_shoulder", f"{side}_elbow")]
        points[K[f"{side}_elbow"]] = elbow
        points[K[f"{side}_hand"]] = elbow + _direction(upper + bend) * BONE_LENGTHS[(f"{side}_elbow", f"{side}_hand")]
    points[K["hip"]] = points[K["neck"]] + down * BONE_LENGTHS[("neck", "hip")]
    points[K["feet"]] = points[K["hip"]] + _direction(legs) * BONE_LENGTHS[("hip", "feet")]

    low = MARGIN - points.min(axis=0)
    high = 1.0 - MARGIN - points.max(axis=0)
    offset = np.array([low[0] + (high[0] - low[0]) * rng.uniform(), low[1] + (high[1] - low[1]) * rng.uniform()])
    points = points + offset
    return PoseSpec(keypoints=tuple((float(x), float(y)) for x, y in points), facing_front=facing_front)
