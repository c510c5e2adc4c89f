import numpy as np
import pytest

from cfld.extract.dataset import images_of, make_pairs
from cfld.models.cfld_model import CfldModel
from cfld.train.pretrain_backbone import encode_latents_task, fit_backbone
from cfld.train.pretrain_codec import fit_codec, reconstruction_loss


@pytest.fixture
def images(tiny_config):
    return images_of(make_pairs(tiny_config.seed, range(4), tiny_config.image_size))


def snapshot(model: CfldModel, prefix: str, inside: bool) -> dict[str, bytes]:
    return {
        name: p.data.tobytes()
        for name, p in model.parameters().items()
        if name.startswith(prefix) == inside
    }


class TestFitCodec:

    def test_zero_steps_keeps_initialisation(self, images, tiny_config):
        model = CfldModel(tiny_config)
        before = model.state_dict()
        assert fit_codec(model, images, tiny_config, 0) == []
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_trains_only_the_codec_and_calibrates(self, images, tiny_config):
        model = CfldModel(tiny_config)
        others = snapshot(model, "codec.", inside=False)
        rows = fit_codec(model, images, tiny_config, 3)

        assert [row["step"] for row in rows] == [1, 2, 3]
        assert all(row["lr"] == tiny_config.codec_lr for row in rows)
        assert snapshot(model, "codec.", inside=False) == others
        latents = model.codec.encode_latent(images)
        assert latents.std() == pytest.approx(1.0, rel=1e-3)

    def test_reconstruction_loss_is_scalar(self, images, tiny_config):
        assert reconstruction_loss(CfldModel(tiny_config), images[:2]).item() > 0.0

    def test_needs_images(self, tiny_config):
        with pytest.raises(ValueError):
            fit_codec(CfldModel(tiny_config), np.zeros((0, 3, 32, 32)), tiny_config, 1)


class TestFitBackbone:

    def test_encode_latents_shape(self, images, tiny_config):
        latents = encode_latents_task.fn(CfldModel(tiny_config), images, batch=3)
        assert latents.shape == (len(images), 4, 8, 8)

    def test_trains_only_the_unet(self, tiny_config):
        model = CfldModel(tiny_config)
        latents = np.random.default_rng(0).normal(size=(6, 4, 8, 8)).astype(np.float32)
        others = snapshot(model, "unet.", inside=False)
        unet = snapshot(model, "unet.", inside=True)

        rows = fit_backbone(model, latents, tiny_config, 2)

        assert [row["step"] for row in rows] == [1, 2]
        assert model.stage == "backbone"
        assert snapshot(model, "unet.", inside=False) == others
        assert snapshot(model, "unet.", inside=True) != unet

    def test_same_seed_same_weights(self, tiny_config):
        latents = np.random.default_rng(1).normal(size=(4, 4, 8, 8)).astype(np.float32)
        a, b = CfldModel(tiny_config), CfldModel(tiny_config)
        fit_backbone(a, latents, tiny_config, 2)
        fit_backbone(b, latents, tiny_config, 2)
        assert snapshot(a, "unet.", inside=True) == snapshot(b, "unet.", inside=True)
