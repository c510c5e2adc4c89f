"""
Training objective: L_overall = L_mse + L_rec.

L_mse denoises the target latent E(x_g) conditioned on (x_s, x_tp); L_rec denoises the source
latent E(x_s) conditioned on (x_s, x_sp). Each term is the squared error summed over latent
elements and averaged over the batch, with its own cubic timestep and noise draw per item.

Every random quantity of step `s` comes from substream `s` of the "cfld" stage stream, so a
step can be replayed and a resumed run continues exactly where the interrupted one stopped.
"""

from dataclasses import dataclass

import numpy as np

from cfld.common.config import CfldConfig
from cfld.diffusion.schedule import VarianceSchedule, q_sample, sample_timestep_cubic
from cfld.extract.dataset import PairArrays
from cfld.models.cfld_model import CfldModel
from cfld.numkit import ops
from cfld.numkit.optim import Adam
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor
from cfld.train.loop import apply_update, stage_rng

KEEP = "keep"
DROP_BOTH = "drop_both"


def drop_conditions(rng: Rng, drop_percent: float) -> str:
    """KEEP, or DROP_BOTH with probability drop_percent / 100."""
    return DROP_BOTH if rng.uniform() < drop_percent / 100.0 else KEEP


def drop_flags(rng: Rng, size: int, drop_percent: float, independent: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-item keep flags (source, pose); joint drops unless `independent`."""
    keep_source = np.array([drop_conditions(rng, drop_percent) == KEEP for _ in range(size)])
    if not independent:
        return keep_source, keep_source.copy()
    keep_pose = np.array([drop_conditions(rng, drop_percent) == KEEP for _ in range(size)])
    return keep_source, keep_pose


@dataclass(frozen=True)
class Batch:
    data: PairArrays
    indices: np.ndarray
    keep_source: np.ndarray
    keep_pose: np.ndarray
    t_mse: np.ndarray
    t_rec: np.ndarray
    eps_mse: np.ndarray
    eps_rec: np.ndarray
    step: int
    seed: int


def sample_batch(data: PairArrays, config: CfldConfig, step: int, seed: int | None = None) -> Batch:
    seed = config.seed if seed is None else seed
    rng = stage_rng(seed, "cfld").substream(step)
    size = config.batch_size
    indices = np.asarray(rng.integers(0, len(data), size))
    t_mse = sample_timestep_cubic(rng, config.timesteps, size)
    t_rec = sample_timestep_cubic(rng, config.timesteps, size)
    keep_source, keep_pose = drop_flags(rng, size, config.drop_percent, config.independent_drop)
    latent_shape = (size, config.latent_channels, config.latent_size, config.latent_size)
    eps_mse = np.asarray(rng.normal(latent_shape), dtype=np.float32)
    eps_rec = np.asarray(rng.normal(latent_shape), dtype=np.float32)
    return Batch(
        data=data.take(indices),
        indices=indices,
        keep_source=keep_source,
        keep_pose=keep_pose,
        t_mse=t_mse,
        t_rec=t_rec,
        eps_mse=eps_mse,
        eps_rec=eps_rec,
        step=step,
        seed=seed,
    )


def noise_loss(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Squared error summed per item, averaged over the batch."""
    diff = eps_hat - eps
    per_item = ops.sum(diff * diff, axis=tuple(range(1, diff.ndim)))
    return ops.mean(per_item)


def compute_losses(model: CfldModel, batch: Batch, sched: VarianceSchedule) -> dict[str, Tensor]:
    data = batch.data
    z0_target = model.codec.encode_latent(data.x_g)
    z0_source = model.codec.encode_latent(data.x_s)
    source = model.source_conditions(data.x_s)

    z_mse = q_sample(z0_target, batch.t_mse, batch.eps_mse, sched)
    bundle = model.conditions(data.x_s, data.x_tp, batch.keep_source, batch.keep_pose, source=source)
    loss_mse = noise_loss(model.epsilon(z_mse, batch.t_mse, bundle), batch.eps_mse)

    z_rec = q_sample(z0_source, batch.t_rec, batch.eps_rec, sched)
    bundle = model.conditions(data.x_s, data.x_sp, batch.keep_source, batch.keep_pose, source=source)
    loss_rec = noise_loss(model.epsilon(z_rec, batch.t_rec, bundle), batch.eps_rec)

    return {"mse": loss_mse, "rec": loss_rec, "overall": loss_mse + loss_rec}


def training_step(
    model: CfldModel,
    optimizer: Adam,
    batch: Batch,
    sched: VarianceSchedule,
    lr: float,
) -> dict[str, float]:
    """One optimiser update on L_overall; returns the three loss values."""
    optimizer.zero_grad()
    losses = compute_losses(model, batch, sched)
    return apply_update(optimizer, losses, "overall", lr, batch.step, batch.seed)


def lr_schedule(step: int, config: CfldConfig, base_lr: float | None = None) -> float:
    """Linear warmup to the base rate, then x0.1 once past the decay milestone."""
    base_lr = config.learning_rate if base_lr is None else base_lr
    warmup = config.warmup_steps
    lr = base_lr * min(1.0, step / warmup) if warmup > 0 else base_lr
    if step > config.decay_step:
        lr *= 0.1
    return lr
