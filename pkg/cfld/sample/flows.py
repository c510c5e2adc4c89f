"""
Inference flows: sample, transfer, interpolate and attention visualisation.

All flows read 8-bit PNGs at the image size recorded in the checkpoint and write PNGs
atomically. Sampling is a pure function of (checkpoint, inputs, weights, seed), so reruns are
byte-identical.
"""

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE

from cfld.common.images import make_grid, read_mask, read_png, write_png
from cfld.diffusion.schedule import DdimPlan
from cfld.models.cfld_model import CfldModel, load_model
from cfld.models.conditioning import DROPPED
from cfld.numkit.ops import bilinear_matrix
from cfld.numkit.tensor import no_grad
from cfld.sample.editing import interpolate_styles, style_transfer
from cfld.sample.guidance import GuidanceWeights, generate


@task(name="load_model", cache_policy=NO_CACHE)
def load_model_task(checkpoint: Path) -> CfldModel:
    logger = get_run_logger()
    model, stored = load_model(checkpoint)
    logger.info(f"Loaded {model.stage} model at step {stored.metadata.get('step')} from {checkpoint}")
    return model


def sampling_setup(
    model: CfldModel,
    w_pose: float | None,
    w_app: float | None,
    steps: int | None,
) -> tuple[GuidanceWeights, DdimPlan]:
    config = model.config
    weights = GuidanceWeights(
        config.w_pose if w_pose is None else w_pose,
        config.w_app if w_app is None else w_app,
    )
    return weights, DdimPlan.even(config.timesteps, config.ddim_steps if steps is None else steps)


@flow(name="sample", persist_result=False)
def sample_flow(
    checkpoint: Path,
    source: Path,
    pose: Path | None,
    output: Path,
    seed: int = 0,
    w_pose: float | None = None,
    w_app: float | None = None,
    steps: int | None = None,
) -> Path:
    """
    Render the person in `source` in the pose of the pose map `pose`.

    Without a pose map, the pose condition is dropped (zero pose pyramid in every branch).
    """
    logger = get_run_logger()
    model = load_model_task(checkpoint)
    size = model.config.image_size
    weights, plan = sampling_setup(model, w_pose, w_app, steps)
    x_tp = read_png(pose, size) if pose is not None else DROPPED
    image = generate(model, read_png(source, size), x_tp, weights, seed, plan)
    path = write_png(output, image)
    logger.info(f"Wrote sample (seed={seed}, {len(plan)} DDIM steps, {weights}) to {path}")
    return path


@flow(name="transfer", persist_result=False)
def transfer_flow(
    checkpoint: Path,
    reference: Path,
    mask: Path,
    style: Path,
    pose: Path,
    output: Path,
    seed: int = 0,
    w_pose: float | None = None,
    w_app: float | None = None,
    steps: int | None = None,
) -> Path:
    """Repaint the masked region of `reference` (pose map `pose`) with the appearance of `style`."""
    logger = get_run_logger()
    model = load_model_task(checkpoint)
    size = model.config.image_size
    weights, plan = sampling_setup(model, w_pose, w_app, steps)
    edit_mask = read_mask(mask)
    image = style_transfer(
        model, read_png(reference, size), edit_mask, read_png(style, size), read_png(pose, size), weights, seed, plan
    )
    path = write_png(output, image)
    logger.info(f"Wrote style transfer ({edit_mask.mean():.1%} of pixels editable) to {path}")
    return path


@flow(name="interpolate", persist_result=False)
def interpolate_flow(
    checkpoint: Path,
    source_a: Path,
    source_b: Path,
    pose: Path,
    output: Path,
    lams: Sequence[float] = (0.5,),
    seed: int = 0,
    w_pose: float | None = None,
    w_app: float | None = None,
    steps: int | None = None,
) -> Path:
    """
    Blend the styles of two sources in the pose `pose`.

    One weight writes one image; several weights write a single-row grid in the given order.
    """
    logger = get_run_logger()
    model = load_model_task(checkpoint)
    size = model.config.image_size
    weights, plan = sampling_setup(model, w_pose, w_app, steps)
    x_a, x_b, x_tp = read_png(source_a, size), read_png(source_b, size), read_png(pose, size)
    images = [interpolate_styles(model, x_a, x_b, lam, x_tp, weights, seed, plan) for lam in lams]
    image = images[0] if len(images) == 1 else make_grid(images, columns=len(images))
    path = write_png(output, image)
    logger.info(f"Wrote {len(images)} interpolation(s) for weights {list(lams)} to {path}")
    return path


def attention_panels(model: CfldModel, x_s: np.ndarray) -> list[np.ndarray]:
    """One panel per query: the source blended with its head-averaged last-block PRD attention."""
    size = model.config.image_size
    if model.prd is None:
        raise ValueError(f"Attention maps need prompt_mode=prd, this model uses {model.config.prompt_mode}")
    model.prd.record_attention(True)
    try:
        with no_grad():
            features = model.source_encoder(x_s[None])
            model.prd(features[-1])
        maps = model.prd.attention_maps()
    finally:
        model.prd.record_attention(False)
    if maps is None:
        raise ValueError("The perception-refined decoder has no blocks to visualise")
    grid = features[-1].shape[2]
    rows = bilinear_matrix(grid, size)
    panels = []
    for query_map in maps[0].reshape(-1, grid, grid):
        heat = rows @ query_map @ rows.T
        heat = (heat - heat.min()) / max(float(heat.max() - heat.min()), 1e-12)
        overlay = np.stack([2.0 * heat - 1.0, -np.ones_like(heat), -np.ones_like(heat)])
        panels.append((0.5 * x_s + 0.5 * overlay).astype(np.float32))
    return panels


@flow(name="attn_viz", persist_result=False)
def attn_viz_flow(checkpoint: Path, source: Path, output: Path) -> Path:
    """Write a grid with one attention panel per learnable query."""
    logger = get_run_logger()
    model = load_model_task(checkpoint)
    panels = attention_panels(model, read_png(source, model.config.image_size))
    path = write_png(output, make_grid(panels, columns=math.ceil(math.sqrt(len(panels)))))
    logger.info(f"Wrote {len(panels)} attention panels to {path}")
    return path
