"""
UNet noise predictor eps(z_t, t, x_s, x_tp) with Hybrid-Granularity Attention.

Down blocks cross-attend to the coarse prompt [B, Q, D] and add the pose pyramid at their end.
Up blocks cross-attend to the same prompt with queries biased by B_l = phi_A(f_l), the
fine-grained appearance encoding of one source feature map (HGA). Scale l counts up blocks from
the finest grid, so with 16x16 latents:

    scale l   grid    UNet level   f_l (default map)
    1         16x16   0            f_1
    2         8x8     1            f_2
    3         4x4     2            f_3
"""

import math
from typing import Sequence

import numpy as np

from cfld.common.config import CfldConfig
from cfld.common.errors import ShapeError
from cfld.models.conditioning import groups_for
from cfld.numkit import ops
from cfld.numkit.nn import (
    Attention,
    Conv2d,
    GroupNorm,
    Linear,
    Module,
    ResBlock,
    TransformerLayer,
    to_map,
    to_tokens,
)
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, as_tensor


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding [B, dim] of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    frequencies = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * frequencies[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


class HgaTransformerLayer(TransformerLayer):
    """Transformer layer whose cross-attention is Hybrid-Granularity Attention."""

    def cross(self, x: Tensor, context: Tensor, query_bias: Tensor | None, key_pos: Tensor | None) -> Tensor:
        return hga_attention(self.cross_attn, x, context, query_bias)


class SpatialTransformer(Module):
    """Norm, 1x1 in, transformer layer on H*W tokens, 1x1 out, residual."""

    def __init__(self, channels: int, config: CfldConfig, rng: Rng, context_dim: int | None, hga: bool = False):
        self.norm = GroupNorm(groups_for(config, channels), channels)
        self.proj_in = Conv2d(channels, channels, 1, rng)
        layer = HgaTransformerLayer if hga else TransformerLayer
        self.layer = layer(channels, config.attention_heads, rng, context_dim=context_dim, prenorm=config.prenorm)
        self.proj_out = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor, context: Tensor | None = None, query_bias: Tensor | None = None) -> Tensor:
        height, width = x.shape[2:]
        tokens = to_tokens(self.proj_in(self.norm(x)))
        tokens = self.layer(tokens, context, query_bias=query_bias)
        return x + self.proj_out(to_map(tokens, height, width))


class UNetLayer(Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int, config: CfldConfig, rng: Rng, hga: bool = False):
        self.res = ResBlock(
            in_channels, out_channels, rng, groups=groups_for(config, in_channels, out_channels), time_dim=time_dim
        )
        self.transformer = SpatialTransformer(out_channels, config, rng, context_dim=config.prompt_dim, hga=hga)

    def forward(self, x: Tensor, temb: Tensor, prompt: Tensor, query_bias: Tensor | None = None) -> Tensor:
        return self.transformer(self.res(x, temb), prompt, query_bias=query_bias)


class DownBlock(Module):
    def __init__(self, in_channels: int, width: int, time_dim: int, config: CfldConfig, rng: Rng, downsample: bool):
        self.layers = [
            UNetLayer(in_channels if index == 0 else width, width, time_dim, config, rng)
            for index in range(config.unet_layers_per_block)
        ]
        self.downsample = Conv2d(width, width, 3, rng, stride=2, pad=1) if downsample else None


class UpBlock(Module):
    def __init__(self, in_channels: int, skip_channels: int, width: int, time_dim: int, config: CfldConfig, rng: Rng, upsample: bool):
        self.layers = [
            UNetLayer(in_channels + skip_channels if index == 0 else width, width, time_dim, config, rng, hga=True)
            for index in range(config.unet_layers_per_block)
        ]
        self.upsample = Conv2d(width, width, 3, rng) if upsample else None

    def cross_attentions(self) -> list[Attention]:
        return [layer.transformer.layer.cross_attn for layer in self.layers]


class UNetDenoiser(Module):
    """H_N."""

    def __init__(self, config: CfldConfig, rng: Rng):
        widths = config.unet_channels
        self.config = config
        self.embed_dim = widths[0]
        time_dim = 4 * widths[0]
        self.time_fc1 = Linear(widths[0], time_dim, rng.substream(0))
        self.time_fc2 = Linear(time_dim, time_dim, rng.substream(1))
        self.conv_in = Conv2d(config.latent_channels, widths[0], 3, rng.substream(2))

        self.down_blocks = []
        previous = widths[0]
        for level, width in enumerate(widths):
            self.down_blocks.append(
                DownBlock(previous, width, time_dim, config, rng.substream(10 + level), downsample=level < len(widths) - 1)
            )
            previous = width

        mid_rng = rng.substream(20)
        self.mid_res1 = ResBlock(previous, previous, mid_rng, groups=groups_for(config, previous), time_dim=time_dim)
        self.mid_transformer = SpatialTransformer(previous, config, mid_rng, context_dim=config.prompt_dim)
        self.mid_res2 = ResBlock(previous, previous, mid_rng, groups=groups_for(config, previous), time_dim=time_dim)

        # up_blocks[0] is the coarsest grid; up_blocks[-1] the finest
        self.up_blocks = []
        for level in reversed(range(len(widths))):
            self.up_blocks.append(
                UpBlock(previous, widths[level], widths[level], time_dim, config, rng.substream(30 + level), upsample=level > 0)
            )
            previous = widths[level]

        self.norm_out = GroupNorm(groups_for(config, widths[0]), widths[0])
        self.conv_out = Conv2d(widths[0], config.latent_channels, 3, rng.substream(40))

    def up_block_at_scale(self, scale: int) -> UpBlock:
        """Up block of HGA scale l (1 = finest grid)."""
        return self.up_blocks[len(self.up_blocks) - scale]

    def scale_grid(self, scale: int) -> int:
        return self.config.latent_size >> (scale - 1)

    def forward(
        self,
        z_t,
        t,
        prompt: Tensor,
        pose_pyramid: Sequence[Tensor],
        appearance_biases: Sequence[Tensor | None] | None = None,
    ) -> Tensor:
        z_t = as_tensor(z_t)
        prompt = as_tensor(prompt)
        batch = z_t.shape[0]
        expected = (self.config.prompt_tokens, self.config.prompt_dim)
        if prompt.ndim != 3 or prompt.shape[1:] != expected:
            raise ShapeError(f"Prompt must be [B, {expected[0]}, {expected[1]}], got {prompt.shape}")
        if prompt.shape[0] != batch:
            raise ShapeError(f"Prompt batch {prompt.shape[0]} does not match latent batch {batch}")
        if len(pose_pyramid) != len(self.down_blocks):
            raise ShapeError(f"Pose pyramid needs {len(self.down_blocks)} levels, got {len(pose_pyramid)}")
        biases = list(appearance_biases) if appearance_biases is not None else [None] * len(self.up_blocks)
        if len(biases) != len(self.up_blocks):
            raise ShapeError(f"Expected {len(self.up_blocks)} appearance biases (one per scale), got {len(biases)}")

        t = np.broadcast_to(np.asarray(t), (batch,))
        temb = self.time_fc2(ops.silu(self.time_fc1(Tensor(timestep_embedding(t, self.embed_dim)))))

        h = self.conv_in(z_t)
        skips = []
        for block, pose in zip(self.down_blocks, pose_pyramid):
            for layer in block.layers:
                h = layer(h, temb, prompt)
            if pose.shape != h.shape:
                raise ShapeError(f"Pose features {pose.shape} do not match down-block output {h.shape}")
            h = h + pose
            skips.append(h)
            if block.downsample is not None:
                h = block.downsample(h)

        h = self.mid_res1(h, temb)
        h = self.mid_transformer(h, prompt)
        h = self.mid_res2(h, temb)

        # biases are indexed by scale l = 1..3; up_blocks run coarse to fine
        for index, block in enumerate(self.up_blocks):
            bias = biases[len(self.up_blocks) - 1 - index]
            h = ops.concat([h, skips.pop()], axis=1)
            for layer in block.layers:
                h = layer(h, temb, prompt, query_bias=bias)
            if block.upsample is not None:
                h = block.upsample(ops.upsample_nearest(h, 2))
        return self.conv_out(ops.silu(self.norm_out(h)))


class AppearanceEncoder(Module):
    """phi_A for one scale: zero conv, K transformer layers, zero conv."""

    def __init__(self, in_channels: int, width: int, grid: int, config: CfldConfig, rng: Rng):
        self.grid = grid
        self.zero_in = Conv2d(in_channels, width, 1, rng, zero=True)
        self.layers = [
            TransformerLayer(width, config.attention_heads, rng, prenorm=config.prenorm) for _ in range(config.appearance_layers)
        ]
        self.zero_out = Conv2d(width, width, 1, rng, zero=True)

    def forward(self, f_l: Tensor) -> Tensor:
        """Query bias B [B, grid*grid, width] for the appearance map `f_l`."""
        h = self.zero_in(ops.resize_bilinear(f_l, (self.grid, self.grid)))
        tokens = to_tokens(h)
        for layer in self.layers:
            tokens = layer(tokens)
        return to_tokens(self.zero_out(to_map(tokens, self.grid, self.grid)))


class HybridAppearance(Module):
    """H_A: one phi_A per HGA scale, each reading the source map named by hga_feature_map."""

    def __init__(self, config: CfldConfig, rng: Rng):
        self.feature_map = config.hga_feature_map
        self.encoders = [
            AppearanceEncoder(
                config.encoder_channels[config.hga_feature_map[scale] - 1],
                config.unet_channels[scale],
                config.latent_size >> scale,
                config,
                rng.substream(scale),
            )
            for scale in range(len(config.unet_channels))
        ]

    def forward(self, features: Sequence[Tensor]) -> list[Tensor]:
        """Biases [B_1, B_2, B_3] from the source maps [f_1, f_2, f_3, f_4]."""
        return [encoder(features[self.feature_map[scale] - 1]) for scale, encoder in enumerate(self.encoders)]


def hga_attention(cross_attn: Attention, f_h: Tensor, prompt: Tensor, appearance_bias: Tensor | None) -> Tensor:
    """softmax((W_q F_h + B_l) (W_k F_d)^T / sqrt(d)) W_v F_d, then the output projection.

    `appearance_bias` is B_l = phi_A(f_l) for the block's scale; None attends without a bias.
    """
    if appearance_bias is not None and appearance_bias.shape[-2:] != f_h.shape[-2:]:
        raise ShapeError(f"Appearance bias {appearance_bias.shape} is not token-aligned with {f_h.shape}")
    return cross_attn(f_h, prompt, query_bias=appearance_bias)
