"""End-to-end learning run on the desk configuration (opt-in: `pytest --run-acceptance`)."""

import numpy as np
import pytest

from cfld.common.config import CfldConfig
from cfld.diffusion.schedule import ddim_sample_loop
from cfld.evaluate.metrics import MetricReport, psnr
from cfld.extract.dataset import PairArrays, images_of, make_pairs, split_indices
from cfld.extract.render import color_histogram
from cfld.models.cfld_model import CfldModel
from cfld.models.conditioning import DROPPED
from cfld.numkit.tensor import no_grad
from cfld.sample.editing import style_transfer
from cfld.sample.guidance import default_plan, generate, initial_noise, schedule_of
from cfld.train.pretrain_backbone import encode_latents_task, fit_backbone
from cfld.train.pretrain_codec import fit_codec
from cfld.train.train_cfld import fit_cfld, make_optimizer

MIN_CODEC_PSNR = 28.0
MIN_PSNR = 20.0
MIN_SSIM = 0.7
BACKBONE_SAMPLES = 4


def mean_histogram(images) -> np.ndarray:
    return np.mean([color_histogram(image) for image in images], axis=0)


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Total variation distance between two normalised histograms."""
    return 0.5 * float(np.abs(a - b).sum())


def unconditional_samples(model: CfldModel, count: int) -> np.ndarray:
    bundle = model.conditions(None, DROPPED, batch=count)

    def eps_fn(z: np.ndarray, t: int) -> np.ndarray:
        with no_grad():
            return model.epsilon(z, t, bundle).data

    z0 = ddim_sample_loop(initial_noise(model, seed=0, batch=count), eps_fn, default_plan(model), schedule_of(model))
    return model.codec.decode_latent(z0)


@pytest.fixture(scope="module")
def trained():
    config = CfldConfig(log_every=200)
    model = CfldModel(config)
    pretrain = images_of(make_pairs(config.seed, split_indices(config, "pretrain"), config.image_size))
    held_out = images_of(make_pairs(config.seed, split_indices(config, "test"), config.image_size))

    fit_codec(model, pretrain, config, config.codec_steps)
    codec_psnr = float(np.mean([psnr(model.codec.decode_latent(model.codec.encode_latent(x[None]))[0], x) for x in held_out]))

    fit_backbone(model, encode_latents_task.fn(model, pretrain), config, config.backbone_steps)
    with no_grad():
        backbone_samples = unconditional_samples(model, BACKBONE_SAMPLES)

    model.set_stage("cfld")
    pairs = make_pairs(config.seed, split_indices(config, "train"), config.image_size)
    fit_cfld(model, make_optimizer(model), PairArrays.stack(pairs), 0, config.train_steps)
    return {
        "model": model,
        "pairs": pairs,
        "pretrain": pretrain,
        "codec_psnr": codec_psnr,
        "backbone_samples": backbone_samples,
    }


@pytest.mark.acceptance
class TestPretraining:

    def test_codec_reconstructs_held_out_images(self, trained):
        assert trained["codec_psnr"] >= MIN_CODEC_PSNR

    def test_backbone_samples_look_like_training_data(self, trained):
        reference = mean_histogram(trained["pretrain"])
        samples = mean_histogram(trained["backbone_samples"])
        noise = mean_histogram(np.random.default_rng(0).uniform(-1, 1, size=trained["backbone_samples"].shape))
        assert histogram_distance(samples, reference) < 0.5 * histogram_distance(noise, reference)


@pytest.mark.acceptance
class TestOverfit:

    def test_training_pairs_are_reproduced(self, trained):
        model, pairs = trained["model"], trained["pairs"]
        report = MetricReport()
        for pair in pairs:
            report.add(pair.index, generate(model, pair.x_s, pair.x_tp, seed=0), pair.x_g)
        assert report.mean_psnr >= MIN_PSNR
        assert report.mean_ssim >= MIN_SSIM

    def test_pose_features_influence_output(self, trained):
        model, pair = trained["model"], trained["pairs"][0]
        posed = generate(model, pair.x_s, pair.x_tp, seed=0)
        dropped = generate(model, pair.x_s, DROPPED, seed=0)
        assert np.abs(posed - dropped).mean() > 0.01

    def test_empty_mask_keeps_the_reference(self, trained):
        model = trained["model"]
        reference, style = trained["pairs"][:2]
        size = model.config.image_size
        edited = style_transfer(model, reference.x_g, np.zeros((size, size), dtype=bool), style.x_s, reference.x_tp, seed=0)
        codec = model.codec
        reconstruction = codec.decode_latent(codec.encode_latent(reference.x_g[None]))[0]
        np.testing.assert_allclose(edited, reconstruction, atol=1e-4)
        assert psnr(edited, reference.x_g) == pytest.approx(psnr(reconstruction, reference.x_g), abs=0.1)
