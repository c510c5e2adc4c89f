import numpy as np
import pytest

from cfld.common.errors import ArgumentError, ShapeError
from cfld.diffusion.schedule import DdimPlan
from cfld.extract.dataset import gen_pair
from cfld.models.cfld_model import CfldModel
from cfld.sample.editing import interpolate_styles, latent_mask, style_transfer
from cfld.sample.guidance import GuidanceWeights, generate

PLAN = DdimPlan.even(50, 3)
WEIGHTS = GuidanceWeights(2.0, 2.0)


@pytest.fixture
def model(tiny_config):
    return CfldModel(tiny_config)


@pytest.fixture
def pairs(tiny_config):
    return gen_pair(tiny_config.seed, 4, 32), gen_pair(tiny_config.seed, 5, 32)


class TestLatentMask:

    def test_cell_needs_every_pixel(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[:8, :8] = True
        mask[8:12, 8:12] = True
        cells = latent_mask(mask, 4, 32)
        assert cells.shape == (8, 8)
        assert cells[:2, :2].all()
        assert cells[2, 2]
        assert cells.sum() == 5

    def test_partial_cell_is_kept(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[0:3, 0:4] = True
        assert not latent_mask(mask, 4, 32).any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            latent_mask(np.ones((16, 16), dtype=bool), 4, 32)


class TestStyleTransfer:

    def test_full_mask_is_plain_generation(self, model, pairs):
        reference, style = pairs
        mask = np.ones((32, 32), dtype=bool)
        edited = style_transfer(model, reference.x_g, mask, style.x_s, reference.x_tp, WEIGHTS, seed=2, plan=PLAN)
        plain = generate(model, style.x_s, reference.x_tp, WEIGHTS, seed=2, plan=PLAN)
        np.testing.assert_allclose(edited, plain, atol=1e-5)

    def test_empty_mask_reconstructs_the_reference(self, model, pairs):
        reference, style = pairs
        mask = np.zeros((32, 32), dtype=bool)
        edited = style_transfer(model, reference.x_g, mask, style.x_s, reference.x_tp, WEIGHTS, seed=2, plan=PLAN)
        codec = model.codec
        expected = codec.decode_latent(codec.encode_latent(reference.x_g))
        np.testing.assert_allclose(edited, expected, atol=1e-5)

    def test_reproducible(self, model, pairs):
        reference, style = pairs
        mask = np.zeros((32, 32), dtype=bool)
        mask[8:24, :] = True
        a = style_transfer(model, reference.x_g, mask, style.x_s, reference.x_tp, WEIGHTS, seed=4, plan=PLAN)
        b = style_transfer(model, reference.x_g, mask, style.x_s, reference.x_tp, WEIGHTS, seed=4, plan=PLAN)
        np.testing.assert_array_equal(a, b)


class TestInterpolateStyles:

    @pytest.mark.parametrize("lam, side", [(0.0, 0), (1.0, 1)])
    def test_endpoints_are_single_source_generation(self, model, pairs, lam, side):
        a, b = pairs
        blended = interpolate_styles(model, a.x_s, b.x_s, lam, a.x_tp, WEIGHTS, seed=1, plan=PLAN)
        plain = generate(model, pairs[side].x_s, a.x_tp, WEIGHTS, seed=1, plan=PLAN)
        np.testing.assert_array_equal(blended, plain)

    def test_midpoint_of_one_style_is_that_style(self, model, pairs):
        a, _ = pairs
        blended = interpolate_styles(model, a.x_s, a.x_s, 0.5, a.x_tp, WEIGHTS, seed=2, plan=PLAN)
        plain = generate(model, a.x_s, a.x_tp, WEIGHTS, seed=2, plan=PLAN)
        np.testing.assert_array_equal(blended, plain)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_weight_out_of_range(self, model, pairs, lam):
        a, b = pairs
        with pytest.raises(ArgumentError):
            interpolate_styles(model, a.x_s, b.x_s, lam, a.x_tp)
