"""
Pretrain the latent codec on synthetic person images, then freeze it.

The codec minimises the mean squared reconstruction error of `codec_batch` images per step,
drawn from the pretraining pairs (sources and ground truths). After training, the latent scale
is calibrated so encoded latents have unit standard deviation.

Writes a full model checkpoint (stage "codec") and a loss curve `step,loss,lr`.
"""

from pathlib import Path

import numpy as np
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE

from cfld.common import services
from cfld.common.config import CfldConfig
from cfld.extract.dataset import images_of, split_indices
from cfld.extract.export_data import build_pairs_flow
from cfld.models.cfld_model import CfldModel, save_model, trainable_parameters
from cfld.numkit import ops
from cfld.numkit.optim import Adam
from cfld.train.loop import apply_update, run_loop, stage_rng, write_loss_csv_task

LOSS_COLUMNS = ["step", "loss", "lr"]


def reconstruction_loss(model: CfldModel, images: np.ndarray):
    diff = model.codec(images) - images
    return ops.mean(diff * diff)


def codec_update(model: CfldModel, optimizer: Adam, images: np.ndarray, config: CfldConfig, seed: int):
    def update(step: int, lr: float) -> dict[str, float]:
        rng = stage_rng(seed, "codec").substream(step)
        batch = images[np.asarray(rng.integers(0, len(images), config.codec_batch))]
        optimizer.zero_grad()
        return apply_update(optimizer, {"loss": reconstruction_loss(model, batch)}, "loss", lr, step, seed)

    return update


def fit_codec(
    model: CfldModel,
    images: np.ndarray,
    config: CfldConfig,
    steps: int,
    seed: int | None = None,
) -> list[dict[str, float]]:
    """Train the codec for `steps` updates and calibrate its latent scale.

    `steps=0` leaves the codec exactly as initialised.
    """
    if len(images) == 0:
        raise ValueError("Codec pretraining needs at least one image")
    seed = config.seed if seed is None else seed
    model.set_stage("codec")
    optimizer = Adam(
        trainable_parameters(model), config.codec_lr, (config.adam_beta1, config.adam_beta2), config.adam_eps
    )
    rows = run_loop("codec", codec_update(model, optimizer, images, config, seed), 0, steps, lambda _: config.codec_lr, config.log_every)
    if steps > 0:
        std = model.codec.calibrate(images)
        services.logger().info(f"Calibrated latent scale: raw std {std:.4f}, scale {model.codec.scale:.4f}")
    return rows


@task(name="fit_codec", cache_policy=NO_CACHE)
def fit_codec_task(model: CfldModel, images: np.ndarray, config: CfldConfig, steps: int) -> list[dict[str, float]]:
    logger = get_run_logger()
    logger.info(f"Pretraining codec on {len(images)} images for {steps} steps")
    return fit_codec(model, images, config, steps)


@task(name="save_model", cache_policy=NO_CACHE)
def save_model_task(path: Path, model: CfldModel, step: int) -> Path:
    logger = get_run_logger()
    path = save_model(path, model, step=step)
    logger.info(f"Saved {model.stage} checkpoint at step {step} to {path}")
    return path


@flow(name="pretrain_codec", persist_result=False)
def pretrain_codec_flow(config: CfldConfig, output: Path, loss_csv: Path | None = None) -> Path:
    """
    Build a fresh model, pretrain its codec and save it.

    Args:
        config: Run configuration; `codec_steps`, `codec_lr`, `codec_batch`, `codec_images` apply
        output: Checkpoint path
        loss_csv: Loss curve path (default: next to the checkpoint)
    """
    output = Path(output)
    pairs = build_pairs_flow(config.seed, list(split_indices(config, "pretrain")), config.image_size)
    images = images_of(pairs)
    model = CfldModel(config)
    rows = fit_codec_task(model, images, config, config.codec_steps)
    write_loss_csv_task(rows, loss_csv or output.with_suffix(".codec_loss.csv"), LOSS_COLUMNS)
    return save_model_task(output, model, config.codec_steps)


if __name__ == "__main__":
    pretrain_codec_flow(config=services.config_from_env(), output=services.data_dir() / "codec.cfld")
