"""
Training-free editing on top of `generate`: masked style transfer and style interpolation.

Style transfer keeps a reference image outside a mask. At every visited timestep the working
latent outside the mask is replaced by the reference latent noised to that timestep,

    z <- m * z + (1 - m) * z_ref_t,   z_ref_t = sqrt(abar_t) E(y_ref) + sqrt(1 - abar_t) eps_ref

with one Gaussian draw eps_ref reused at every timestep. At t = 0 the reference term is E(y_ref)
itself, so an empty mask decodes to D(E(y_ref)) and a full mask reproduces `generate`.

Interpolation blends the coarse prompts and the per-scale appearance biases of two sources.
"""

import numpy as np

from cfld.common.errors import ArgumentError, ShapeError
from cfld.diffusion.schedule import DdimPlan, noised_reference
from cfld.models.cfld_model import CfldModel
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import no_grad
from cfld.sample.guidance import (
    GuidanceWeights,
    as_batch,
    guidance_branches,
    initial_noise,
    sample_latent,
    schedule_of,
)

# the reference noise is drawn from this substream of Rng(seed)
REFERENCE_STREAM = 1


def latent_mask(mask: np.ndarray, factor: int, image_size: int) -> np.ndarray:
    """Pixel mask [H, W] -> latent mask [H/f, W/f]; a cell is editable only if all its pixels are."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (image_size, image_size):
        raise ShapeError(f"Mask must be {image_size}x{image_size} to match the images, got {mask.shape}")
    size = image_size // factor
    return mask.reshape(size, factor, size, factor).all(axis=(1, 3))


def style_transfer(
    model: CfldModel,
    y_ref: np.ndarray,
    mask: np.ndarray,
    x_s_style: np.ndarray,
    x_p_ref: np.ndarray,
    weights: GuidanceWeights | None = None,
    seed: int = 0,
    plan: DdimPlan | None = None,
) -> np.ndarray:
    """
    Repaint the masked part of `y_ref` with the appearance of `x_s_style`.

    Args:
        y_ref: Reference image [3, H, W]
        mask: Pixel mask [H, W], True (or 255) where the image may change
        x_s_style: Source image supplying the new appearance
        x_p_ref: Pose map of the reference person
    """
    config = model.config
    weights = weights or GuidanceWeights(config.w_pose, config.w_app)
    m = latent_mask(mask, config.downsample_factor, config.image_size)[None, None].astype(np.float32)
    sched = schedule_of(model)

    z0_ref = model.codec.encode_latent(as_batch(y_ref))
    eps_ref = np.asarray(Rng(seed).substream(REFERENCE_STREAM).normal(z0_ref.shape), dtype=np.float32)

    def composite(z: np.ndarray, t: int) -> np.ndarray:
        return m * z + (1.0 - m) * noised_reference(z0_ref, t, eps_ref, sched).astype(z.dtype)

    plan = plan or DdimPlan.even(config.timesteps, config.ddim_steps)
    with no_grad():
        branches = guidance_branches(model, as_batch(x_s_style), as_batch(x_p_ref))
    z_T = composite(initial_noise(model, seed), plan.indices[0])
    z0 = sample_latent(model, branches, weights, z_T, plan, on_step=composite)
    return model.codec.decode_latent(z0)[0]


def interpolate_styles(
    model: CfldModel,
    x_s_a: np.ndarray,
    x_s_b: np.ndarray,
    lam: float,
    x_tp: np.ndarray,
    weights: GuidanceWeights | None = None,
    seed: int = 0,
    plan: DdimPlan | None = None,
) -> np.ndarray:
    """Generate in pose `x_tp` with the blend (1 - lam) * style a + lam * style b."""
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"Interpolation weight must lie in [0, 1], got {lam}")
    config = model.config
    weights = weights or GuidanceWeights(config.w_pose, config.w_app)
    with no_grad():
        prompt_a, biases_a = model.source_conditions(as_batch(x_s_a))
        prompt_b, biases_b = model.source_conditions(as_batch(x_s_b))
        if lam == 0.0:
            source = (prompt_a, biases_a)
        elif lam == 1.0:
            source = (prompt_b, biases_b)
        else:
            prompt = prompt_a * (1.0 - lam) + prompt_b * lam
            biases = None if biases_a is None else [a * (1.0 - lam) + b * lam for a, b in zip(biases_a, biases_b)]
            source = (prompt, biases)
        branches = guidance_branches(model, None, as_batch(x_tp), source=source)
    z0 = sample_latent(model, branches, weights, initial_noise(model, seed), plan)
    return model.codec.decode_latent(z0)[0]
