"""
Conditioning networks.

- SourceEncoder (H_S): four conv + self-attention stages giving appearance maps f_1..f_4.
- PerceptionRefinedDecoder (H_D): learnable queries refined against f_4 into the prompt [Q, D].
- EncoderPrompt: prompt made of projected source encoder tokens, for runs without H_D.
- PoseAdapter (H_P): pose map to a feature pyramid added at the end of each UNet down block.
- NullEmbeddings: learnable stand-in for the prompt when the source image is dropped.

Extents for the default 64x64 input:

    stage   f_1   f_2   f_3   f_4        pose pyramid   p_1   p_2   p_3
    size    16    8     4     2          size           16    8     4
"""

import math

import numpy as np

from cfld.common.config import CfldConfig
from cfld.common.errors import ShapeError
from cfld.numkit import ops
from cfld.numkit.nn import (
    Conv2d,
    Linear,
    Module,
    Parameter,
    ResBlock,
    TransformerLayer,
    init_normal,
    to_map,
    to_tokens,
)
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, as_tensor, default_dtype

QUERY_INIT_STD = 0.02


class _Dropped:
    """Sentinel for a dropped pose condition."""

    def __repr__(self) -> str:
        return "DROPPED"


DROPPED = _Dropped()


def groups_for(config: CfldConfig, *channels: int) -> int:
    """Largest group count <= norm_groups dividing every channel count."""
    return math.gcd(config.norm_groups, *channels)


def sinusoidal_2d(height: int, width: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine positions [H*W, dim]: half the channels encode y, half x."""
    if dim % 4:
        raise ShapeError(f"2-D positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    frequencies = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    parts = []
    for coordinate in (ys.reshape(-1), xs.reshape(-1)):
        angles = coordinate[:, None] * frequencies[None, :]
        parts += [np.sin(angles), np.cos(angles)]
    return np.concatenate(parts, axis=1)


class EncoderStage(Module):
    def __init__(self, in_channels: int, out_channels: int, config: CfldConfig, rng: Rng, stem: bool = False):
        if stem:
            self.down = Conv2d(in_channels, out_channels, 4, rng, stride=4, pad=0)
        else:
            self.down = Conv2d(in_channels, out_channels, 2, rng, stride=2, pad=0)
        self.res = ResBlock(out_channels, out_channels, rng, groups=groups_for(config, out_channels))
        self.attn = TransformerLayer(out_channels, config.attention_heads, rng, prenorm=config.prenorm)

    def forward(self, x: Tensor) -> Tensor:
        h = self.res(self.down(x))
        height, width = h.shape[2:]
        return to_map(self.attn(to_tokens(h)), height, width)


class SourceEncoder(Module):
    """H_S: hierarchical conv/attention encoder; all stages trainable."""

    def __init__(self, config: CfldConfig, rng: Rng):
        channels = config.encoder_channels
        self.stages = [EncoderStage(3, channels[0], config, rng.substream(0), stem=True)]
        for level in range(1, len(channels)):
            self.stages.append(EncoderStage(channels[level - 1], channels[level], config, rng.substream(level)))

    def forward(self, x_s) -> list[Tensor]:
        x_s = as_tensor(x_s)
        if x_s.ndim != 4 or x_s.shape[1] != 3:
            raise ShapeError(f"Source encoder expects images [B, 3, H, W], got {x_s.shape}")
        height, width = x_s.shape[2:]
        if height != width or height % 32:
            raise ShapeError(f"Source images must be square with extents divisible by 32, got {height}x{width}")
        features = []
        h = x_s
        for stage in self.stages:
            h = stage(h)
            features.append(h)
        return features


class PerceptionRefinedDecoder(Module):
    """H_D: R decoder blocks refining Q learnable queries against the flattened f_4."""

    def __init__(self, config: CfldConfig, rng: Rng):
        self.queries = Parameter(init_normal(rng.substream(0), (config.prompt_queries, config.prompt_dim), QUERY_INIT_STD))
        self.input_proj = Linear(config.encoder_channels[-1], config.prompt_dim, rng.substream(1))
        self.blocks = [
            TransformerLayer(
                config.prompt_dim,
                config.attention_heads,
                rng.substream(2 + index),
                context_dim=config.prompt_dim,
                prenorm=config.prenorm,
            )
            for index in range(config.decoder_blocks)
        ]

    def forward(self, f_4: Tensor, queries: Tensor | None = None) -> Tensor:
        """Prompt [B, Q, D]; `queries` overrides the learned initial queries."""
        batch, _, height, width = f_4.shape
        queries = self.queries if queries is None else queries
        context = self.input_proj(to_tokens(f_4))
        positions = Tensor(sinusoidal_2d(height, width, context.shape[-1]))
        x = ops.expand(queries, (batch,) + queries.shape)
        for block in self.blocks:
            x = block(x, context, key_pos=positions)
        return x

    def record_attention(self, enabled: bool = True) -> None:
        if self.blocks:
            self.blocks[-1].cross_attn.keep_attention = enabled

    def attention_maps(self) -> np.ndarray | None:
        """Head-averaged cross-attention [B, Q, tokens] of the last block's latest call."""
        if not self.blocks or self.blocks[-1].cross_attn.last_attention is None:
            return None
        return self.blocks[-1].cross_attn.last_attention.mean(axis=1)


class EncoderPrompt(Module):
    """Prompt read straight off the source encoder, without learnable queries.

    `encoder` projects the f_4 tokens to D; `multiscale` concatenates the projected tokens of
    f_1..f_4. Fixed 2-D positions are added to each projected map.
    """

    def __init__(self, config: CfldConfig, rng: Rng):
        self.levels = (4,) if config.prompt_mode == "encoder" else (1, 2, 3, 4)
        self.projections = [
            Linear(config.encoder_channels[level - 1], config.prompt_dim, rng.substream(level)) for level in self.levels
        ]

    def forward(self, features) -> Tensor:
        """Prompt [B, tokens, D] from the source maps [f_1, f_2, f_3, f_4]."""
        parts = []
        for level, projection in zip(self.levels, self.projections):
            f_l = features[level - 1]
            height, width = f_l.shape[2:]
            tokens = projection(to_tokens(f_l))
            parts.append(tokens + Tensor(sinusoidal_2d(height, width, tokens.shape[-1])))
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)


class PoseAdapter(Module):
    """H_P: residual conv stack; one output per UNet down block, shape-matched."""

    def __init__(self, config: CfldConfig, rng: Rng):
        widths = config.unet_channels
        stride = config.downsample_factor
        self.stem = Conv2d(3, widths[0], stride, rng.substream(0), stride=stride, pad=0)
        self.blocks = []
        self.downsamplers = []
        previous = widths[0]
        for level, width in enumerate(widths):
            self.blocks.append(ResBlock(previous, width, rng.substream(1 + level), groups=groups_for(config, previous, width)))
            if level < len(widths) - 1:
                self.downsamplers.append(Conv2d(width, width, 3, rng.substream(10 + level), stride=2, pad=1))
            previous = width
        self.widths = widths
        self.factor = stride
        self.image_size = config.image_size

    def forward(self, x_p) -> list[Tensor]:
        x_p = as_tensor(x_p)
        if x_p.ndim != 4 or x_p.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeError(
                f"Pose maps must be [B, 3, {self.image_size}, {self.image_size}], got {x_p.shape}"
            )
        h = self.stem(x_p)
        pyramid = []
        for level, block in enumerate(self.blocks):
            h = block(h)
            pyramid.append(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
        return pyramid

    def shapes(self, batch: int) -> list[tuple[int, ...]]:
        size = self.image_size // self.factor
        return [(batch, width, size >> level, size >> level) for level, width in enumerate(self.widths)]

    def zeros(self, batch: int) -> list[Tensor]:
        return [Tensor(np.zeros(shape, dtype=default_dtype())) for shape in self.shapes(batch)]


def pose_adapter_forward(adapter: PoseAdapter, x_p, batch: int | None = None) -> list[Tensor]:
    """Pose pyramid for `x_p`, or the all-zero pyramid when `x_p` is DROPPED."""
    if x_p is DROPPED:
        if batch is None:
            raise ShapeError("A DROPPED pose needs an explicit batch size")
        return adapter.zeros(batch)
    return adapter(x_p)


class NullEmbeddings(Module):
    def __init__(self, config: CfldConfig, rng: Rng):
        self.prompt = Parameter(init_normal(rng, (config.prompt_tokens, config.prompt_dim), QUERY_INIT_STD))

    def null_prompt(self) -> Parameter:
        """The learnable null prompt [Q, D]; the same object on every call."""
        return self.prompt

    def expanded(self, batch: int) -> Tensor:
        return ops.expand(self.prompt, (batch,) + self.prompt.shape)
