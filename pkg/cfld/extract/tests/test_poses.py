"""Tests for stick-person pose sampling."""

import numpy as np
import pytest

from cfld.extract.poses import BONE_LENGTHS, BONES, J, K, MARGIN, PoseSpec, sample_pose
from cfld.numkit.rng import Rng


class TestPoseSpec:

    def test_keypoint_count(self, upright):
        with pytest.raises(ValueError, match="keypoints"):
            PoseSpec(keypoints=upright.keypoints[:-1])

    def test_margin(self, upright):
        with pytest.raises(ValueError, match="margin"):
            upright.shifted(0.0, 0.1)

    def test_degenerate_bone(self, upright):
        collapsed = list(upright.keypoints)
        collapsed[K["head"]] = collapsed[K["neck"]]
        with pytest.raises(ValueError, match="Degenerate"):
            PoseSpec(keypoints=tuple(collapsed))

    def test_shift_moves_every_point(self, upright):
        np.testing.assert_allclose(upright.shifted(0.02, -0.03).array - upright.array, np.tile([0.02, -0.03], (J, 1)))

    def test_bone_midpoints(self, upright):
        midpoints = upright.bone_midpoints()
        assert midpoints.shape == (len(BONES), 2)
        np.testing.assert_allclose(midpoints[BONES.index(("hip", "feet"))], [0.5, 0.73])


class TestSamplePose:

    def test_deterministic(self):
        assert sample_pose(Rng(3)) == sample_pose(Rng(3))

    @pytest.mark.parametrize("seed", range(20))
    def test_template_and_margin(self, seed):
        pose = sample_pose(Rng(seed))
        points = pose.array
        assert points.min() >= MARGIN - 1e-9
        assert points.max() <= 1.0 - MARGIN + 1e-9
        for (parent, child), length in BONE_LENGTHS.items():
            assert np.linalg.norm(points[K[parent]] - points[K[child]]) == pytest.approx(length, abs=1e-9)

    def test_facing_bit_varies(self):
        assert {sample_pose(Rng(seed)).facing_front for seed in range(20)} == {True, False}
