"""
Cumulative classifier-free guidance and the generation pipeline.

    eps = eps(0, 0) + w_pose (eps(0, x_tp) - eps(0, 0)) + w_app (eps(x_s, x_tp) - eps(0, x_tp))

The three branches are one denoiser call each:

    branch       prompt        appearance biases   pose pyramid
    (0, 0)       null prompt   none                zeros
    (0, x_tp)    null prompt   none                H_P(x_tp)
    (x_s, x_tp)  H_D(H_S(x_s)) H_A(H_S(x_s))       H_P(x_tp)

With a DROPPED target pose every branch gets the zero pyramid.
"""

import math
from dataclasses import dataclass

import numpy as np

from cfld.common.errors import ArgumentError
from cfld.common.services import logger
from cfld.diffusion.schedule import DdimPlan, StepHook, VarianceSchedule, ddim_sample_loop
from cfld.models.cfld_model import CfldModel, ConditioningBundle
from cfld.models.conditioning import DROPPED
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import no_grad

# generation draws z_T from this substream of Rng(seed)
NOISE_STREAM = 0


@dataclass(frozen=True)
class GuidanceWeights:
    w_pose: float = 2.0
    w_app: float = 2.0

    def __post_init__(self):
        if not (math.isfinite(self.w_pose) and math.isfinite(self.w_app)):
            raise ArgumentError(f"Guidance weights must be finite, got {self.w_pose}, {self.w_app}")
        if self.w_pose < 0 or self.w_app < 0:
            logger().warning(f"Negative guidance weight: w_pose={self.w_pose}, w_app={self.w_app}")


def combine_guidance(eps_uncond, eps_pose, eps_full, weights: GuidanceWeights):
    """Weighted combination of the three branch predictions (arrays or scalars)."""
    return eps_uncond + weights.w_pose * (eps_pose - eps_uncond) + weights.w_app * (eps_full - eps_pose)


@dataclass
class GuidanceBranches:
    """Conditioning bundles of the three branches, built once per generation."""

    uncond: ConditioningBundle
    pose: ConditioningBundle
    full: ConditioningBundle


def guidance_branches(model: CfldModel, x_s, x_tp, source=None) -> GuidanceBranches:
    """Bundles for (0, 0), (0, x_tp), (x_s, x_tp); `source` overrides (prompt, biases) of x_s."""
    batch = np.shape(x_s)[0] if source is None else source[0].shape[0]
    uncond = model.conditions(None, DROPPED, batch=batch)
    pose = model.conditions(None, x_tp, batch=batch)
    full = model.conditions(x_s, x_tp, batch=batch, source=source)
    return GuidanceBranches(uncond=uncond, pose=pose, full=full)


def cfg_epsilon(model: CfldModel, z_t: np.ndarray, t: int, branches: GuidanceBranches, weights: GuidanceWeights) -> np.ndarray:
    """Guided noise prediction; exactly three denoiser calls."""
    with no_grad():
        eps_uncond = model.epsilon(z_t, t, branches.uncond).data
        eps_pose = model.epsilon(z_t, t, branches.pose).data
        eps_full = model.epsilon(z_t, t, branches.full).data
    return combine_guidance(eps_uncond, eps_pose, eps_full, weights).astype(z_t.dtype)


def initial_noise(model: CfldModel, seed: int, batch: int = 1) -> np.ndarray:
    """z_T ~ N(0, I) for `seed`; identical for every pipeline given the same seed."""
    config = model.config
    shape = (batch, config.latent_channels, config.latent_size, config.latent_size)
    return np.asarray(Rng(seed).substream(NOISE_STREAM).normal(shape), dtype=np.float32)


def default_plan(model: CfldModel) -> DdimPlan:
    return DdimPlan.even(model.config.timesteps, model.config.ddim_steps)


def schedule_of(model: CfldModel) -> VarianceSchedule:
    config = model.config
    return VarianceSchedule.linear(config.timesteps, config.beta_start, config.beta_end)


def as_batch(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32)[None] if np.ndim(image) == 3 else np.asarray(image, dtype=np.float32)


def sample_latent(
    model: CfldModel,
    branches: GuidanceBranches,
    weights: GuidanceWeights,
    z_T: np.ndarray,
    plan: DdimPlan | None = None,
    on_step: StepHook | None = None,
) -> np.ndarray:
    """DDIM loop from z_T with guided predictions; returns the final latent."""
    plan = plan or default_plan(model)

    def eps_fn(z: np.ndarray, t: int) -> np.ndarray:
        return cfg_epsilon(model, z, t, branches, weights)

    return ddim_sample_loop(z_T, eps_fn, plan, schedule_of(model), on_step=on_step)


def generate(
    model: CfldModel,
    x_s: np.ndarray,
    x_tp,
    weights: GuidanceWeights | None = None,
    seed: int = 0,
    plan: DdimPlan | None = None,
) -> np.ndarray:
    """
    Render the person of `x_s` in the pose `x_tp` (or with the pose DROPPED).

    Accepts single images [3, H, W] or batches; returns images of the same rank in [-1, 1].
    """
    weights = weights or GuidanceWeights(model.config.w_pose, model.config.w_app)
    single = np.ndim(x_s) == 3
    x_s = as_batch(x_s)
    x_tp = x_tp if x_tp is DROPPED else as_batch(x_tp)
    with no_grad():
        branches = guidance_branches(model, x_s, x_tp)
    z0 = sample_latent(model, branches, weights, initial_noise(model, seed, len(x_s)), plan)
    images = model.codec.decode_latent(z0)
    return images[0] if single else images
