"""
Deterministic latent codec (encoder E, decoder D).

Images [3, H, W] in [-1, 1] map to latents [c_z, H/f, W/f]. Latents handed to the diffusion
code are multiplied by `latent_scale` (1 / std measured after pretraining) so they have unit
scale; `encode_latent` / `decode_latent` apply and undo that factor.
"""

import numpy as np

from cfld.common.config import CfldConfig
from cfld.common.errors import ShapeError
from cfld.numkit import ops
from cfld.numkit.nn import Buffer, Conv2d, GroupNorm, Module, ResBlock
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, as_tensor, no_grad


class Encoder(Module):
    def __init__(self, channels: tuple[int, ...], latent_channels: int, groups: int, rng: Rng):
        self.conv_in = Conv2d(3, channels[0], 3, rng)
        self.blocks = []
        self.downsamplers = []
        previous = channels[0]
        for level, width in enumerate(channels):
            self.blocks.append(ResBlock(previous, width, rng, groups=groups))
            if level < len(channels) - 1:
                self.downsamplers.append(Conv2d(width, width, 3, rng, stride=2, pad=1))
            previous = width
        self.norm_out = GroupNorm(groups, previous)
        self.conv_out = Conv2d(previous, latent_channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for level, block in enumerate(self.blocks):
            h = block(h)
            if level < len(self.downsamplers):
                h = self.downsamplers[level](h)
        return self.conv_out(ops.silu(self.norm_out(h)))


class Decoder(Module):
    def __init__(self, channels: tuple[int, ...], latent_channels: int, groups: int, rng: Rng):
        widths = tuple(reversed(channels))
        self.conv_in = Conv2d(latent_channels, widths[0], 3, rng)
        self.blocks = []
        self.upsamplers = []
        previous = widths[0]
        for level, width in enumerate(widths):
            self.blocks.append(ResBlock(previous, width, rng, groups=groups))
            if level < len(widths) - 1:
                self.upsamplers.append(Conv2d(width, width, 3, rng))
            previous = width
        self.norm_out = GroupNorm(groups, previous)
        self.conv_out = Conv2d(previous, 3, 3, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.conv_in(z)
        for level, block in enumerate(self.blocks):
            h = block(h)
            if level < len(self.upsamplers):
                h = self.upsamplers[level](ops.upsample_nearest(h, 2))
        return self.conv_out(ops.silu(self.norm_out(h)))


class LatentCodec(Module):
    def __init__(self, config: CfldConfig, rng: Rng):
        self.factor = config.downsample_factor
        self.latent_channels = config.latent_channels
        groups = min(config.norm_groups, min(config.codec_channels))
        self.encoder = Encoder(config.codec_channels, config.latent_channels, groups, rng.substream(1))
        self.decoder = Decoder(config.codec_channels, config.latent_channels, groups, rng.substream(2))
        self.latent_scale = Buffer(np.ones((1,), dtype=np.float32))

    def _check_image(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"Codec expects images [B, 3, H, W], got {x.shape}")
        if x.shape[2] % self.factor or x.shape[3] % self.factor:
            raise ShapeError(
                f"Image extents {x.shape[2]}x{x.shape[3]} are not divisible by the codec factor {self.factor}"
            )

    def encode(self, x) -> Tensor:
        """Unscaled latent of a batch of images."""
        x = as_tensor(x)
        self._check_image(x)
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"Codec expects latents [B, {self.latent_channels}, h, w], got {z.shape}")
        return self.decoder(z)

    def forward(self, x) -> Tensor:
        return self.decode(self.encode(x))

    @property
    def scale(self) -> float:
        return float(self.latent_scale.data[0])

    def encode_latent(self, x: np.ndarray) -> np.ndarray:
        """Unit-scale latent(s) for image(s) [3, H, W] or [B, 3, H, W]."""
        single = np.ndim(x) == 3
        batch = np.asarray(x)[None] if single else np.asarray(x)
        with no_grad():
            z = self.encode(batch).data * self.scale
        return z[0] if single else z

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        """Image(s) in [-1, 1] for unit-scale latent(s) [c_z, h, w] or [B, c_z, h, w]."""
        single = np.ndim(z) == 3
        batch = np.asarray(z)[None] if single else np.asarray(z)
        with no_grad():
            x = self.decode(batch / self.scale).data
        x = np.clip(x, -1.0, 1.0)
        return x[0] if single else x

    def calibrate(self, images: np.ndarray, batch: int = 16) -> float:
        """Set latent_scale to 1 / std of the raw latents of `images`; returns the std."""
        latents = []
        with no_grad():
            for start in range(0, len(images), batch):
                latents.append(self.encode(images[start : start + batch]).data)
        std = float(np.concatenate(latents).astype(np.float64).std())
        self.latent_scale.data = np.array([1.0 / max(std, 1e-6)], dtype=np.float32)
        return std
