"""Tests for the latent codec."""

import numpy as np
import pytest

from cfld.common.errors import ShapeError
from cfld.models.codec import LatentCodec
from cfld.numkit.rng import Rng


@pytest.fixture
def codec(tiny_config):
    return LatentCodec(tiny_config, Rng(0))


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(-1, 1, size=(3, 3, 32, 32)).astype(np.float32)


class TestLatentCodec:

    def test_latent_shape(self, codec, images):
        assert codec.encode(images).shape == (3, 4, 8, 8)
        assert codec(images).shape == images.shape

    def test_single_image_helpers(self, codec, images):
        z = codec.encode_latent(images[0])
        assert z.shape == (4, 8, 8)
        x = codec.decode_latent(z)
        assert x.shape == (3, 32, 32)
        assert x.min() >= -1.0 and x.max() <= 1.0

    def test_deterministic(self, codec, images):
        np.testing.assert_array_equal(codec.encode_latent(images), codec.encode_latent(images))

    def test_same_rng_same_codec(self, tiny_config, images):
        a = LatentCodec(tiny_config, Rng(4)).encode_latent(images)
        b = LatentCodec(tiny_config, Rng(4)).encode_latent(images)
        np.testing.assert_array_equal(a, b)

    def test_calibration_gives_unit_scale_latents(self, codec, images):
        std = codec.calibrate(images, batch=2)
        assert codec.scale == pytest.approx(1.0 / std, rel=1e-6)
        assert codec.encode_latent(images).std() == pytest.approx(1.0, rel=1e-3)

    def test_rejects_indivisible_extents(self, codec):
        with pytest.raises(ShapeError, match="not divisible"):
            codec.encode(np.zeros((1, 3, 30, 30), dtype=np.float32))

    def test_rejects_wrong_channels(self, codec):
        with pytest.raises(ShapeError):
            codec.encode(np.zeros((1, 1, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeError):
            codec.decode(np.zeros((1, 3, 8, 8), dtype=np.float32))
