"""
Pretrain the UNet base weights as an unconditional latent denoiser.

Every step denoises codec latents of pretraining images with the null prompt and an all-zero
pose pyramid, so the frozen down-block cross-attention learns to route a prompt before CFLD
training freezes it. Only `unet.*` parameters are trained; the codec stays frozen.
"""

from pathlib import Path

import numpy as np
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE

from cfld.common import services
from cfld.common.config import CfldConfig
from cfld.diffusion.schedule import VarianceSchedule, q_sample, sample_timestep_cubic
from cfld.extract.dataset import images_of, split_indices
from cfld.extract.export_data import build_pairs_flow
from cfld.models.cfld_model import CfldModel, load_model, save_model, trainable_parameters
from cfld.models.conditioning import DROPPED
from cfld.numkit.optim import Adam
from cfld.train.loop import apply_update, run_loop, stage_rng, write_loss_csv_task
from cfld.train.objective import lr_schedule, noise_loss

LOSS_COLUMNS = ["step", "loss", "lr"]


@task(name="encode_latents", cache_policy=NO_CACHE)
def encode_latents_task(model: CfldModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Unit-scale latents of every image, encoded once with the frozen codec."""
    latents = [model.codec.encode_latent(images[start : start + batch]) for start in range(0, len(images), batch)]
    return np.concatenate(latents)


def backbone_update(model: CfldModel, optimizer: Adam, latents: np.ndarray, config: CfldConfig, seed: int):
    sched = VarianceSchedule.linear(config.timesteps, config.beta_start, config.beta_end)

    def update(step: int, lr: float) -> dict[str, float]:
        rng = stage_rng(seed, "backbone").substream(step)
        size = config.batch_size
        z0 = latents[np.asarray(rng.integers(0, len(latents), size))]
        t = sample_timestep_cubic(rng, config.timesteps, size)
        eps = np.asarray(rng.normal(z0.shape), dtype=np.float32)
        bundle = model.conditions(None, DROPPED, batch=size)
        optimizer.zero_grad()
        loss = noise_loss(model.epsilon(q_sample(z0, t, eps, sched), t, bundle), eps)
        return apply_update(optimizer, {"loss": loss}, "loss", lr, step, seed)

    return update


def fit_backbone(
    model: CfldModel,
    latents: np.ndarray,
    config: CfldConfig,
    steps: int,
    seed: int | None = None,
) -> list[dict[str, float]]:
    """Train the UNet base for `steps` updates; `steps=0` keeps the random base."""
    seed = config.seed if seed is None else seed
    model.set_stage("backbone")
    optimizer = Adam(
        trainable_parameters(model), config.backbone_lr, (config.adam_beta1, config.adam_beta2), config.adam_eps
    )
    update = backbone_update(model, optimizer, latents, config, seed)
    return run_loop(
        "backbone", update, 0, steps, lambda step: lr_schedule(step, config, config.backbone_lr), config.log_every
    )


@task(name="fit_backbone", cache_policy=NO_CACHE)
def fit_backbone_task(model: CfldModel, latents: np.ndarray, config: CfldConfig, steps: int) -> list[dict[str, float]]:
    logger = get_run_logger()
    logger.info(f"Pretraining backbone on {len(latents)} latents for {steps} steps")
    return fit_backbone(model, latents, config, steps)


@flow(name="pretrain_backbone", persist_result=False)
def pretrain_backbone_flow(checkpoint: Path, output: Path, steps: int | None = None, loss_csv: Path | None = None) -> Path:
    """
    Load a codec checkpoint, pretrain the UNet base and save the result (stage "backbone").

    The run configuration is the one recorded in the codec checkpoint.
    """
    logger = get_run_logger()
    output = Path(output)
    model, _ = load_model(checkpoint, stage="backbone")
    config = model.config
    steps = config.backbone_steps if steps is None else steps
    logger.info(f"Loaded codec from {checkpoint} (latent scale {model.codec.scale:.4f})")

    pairs = build_pairs_flow(config.seed, list(split_indices(config, "pretrain")), config.image_size)
    latents = encode_latents_task(model, images_of(pairs))
    rows = fit_backbone_task(model, latents, config, steps)
    write_loss_csv_task(rows, loss_csv or output.with_suffix(".backbone_loss.csv"), LOSS_COLUMNS)
    path = save_model(output, model, step=steps)
    logger.info(f"Saved backbone checkpoint to {path}")
    return path


if __name__ == "__main__":
    data = services.data_dir()
    pretrain_backbone_flow(checkpoint=data / "codec.cfld", output=data / "backbone.cfld")
