"""Run configuration: every tunable knob with its default.

Config files are plain `key=value` text (comments with `#`). Values given on the command line
override file values. Unknown keys are errors.
"""

import math
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping

from dotenv import dotenv_values

from cfld.common.errors import ConfigError

PROMPT_MODES = ("prd", "encoder", "multiscale")
# source encoder stem (4) and three stride-2 stages
ENCODER_STRIDE = 32


@dataclass(frozen=True)
class CfldConfig:
    """Configuration for a CFLD run."""

    seed: int = 0
    image_size: int = 64  # square images; 128 also supported
    # codec
    codec_channels: tuple[int, ...] = (32, 64, 64)  # one entry per resolution, len = log2(f) + 1
    latent_channels: int = 4  # c_z
    downsample_factor: int = 4  # f
    codec_steps: int = 2000
    codec_lr: float = 1e-3
    codec_batch: int = 8
    codec_images: int = 256
    # schedule
    timesteps: int = 1000  # T
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    # conditioning
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)  # H_S stage widths c1..c4
    prompt_mode: str = "prd"  # prd: Q refined queries; encoder: projected f_4 tokens; multiscale: f_1..f_4 tokens
    prompt_queries: int = 16  # Q
    prompt_dim: int = 128  # D (= C)
    decoder_blocks: int = 4  # R
    attention_heads: int = 4
    appearance_layers: int = 2  # K
    # denoiser
    unet_channels: tuple[int, ...] = (32, 64, 64)  # widths of the three UNet levels
    unet_layers_per_block: int = 1
    hga_feature_map: tuple[int, ...] = (1, 2, 3)  # f_l index feeding HGA scale l=1,2,3
    norm_groups: int = 8
    prenorm: bool = True  # transformer layers normalise before (true) or after (false) each residual
    use_hga: bool = True  # bias up-block queries with phi_A(f_l)
    backbone_steps: int = 2000
    backbone_lr: float = 2e-4
    # training
    train_steps: int = 3000
    batch_size: int = 4
    learning_rate: float = 1e-4
    drop_percent: float = 20.0  # eta
    independent_drop: bool = False
    train_query: bool = False  # also train W_q of the up-block cross-attention
    warmup_steps: int = 100
    decay_epochs: int = 500  # lr x 0.1 after this many passes over the train pairs
    train_pairs: int = 16  # N, train indices [0, N)
    test_pairs: int = 64  # M, test indices [N, N + M)
    checkpoint_every: int = 500
    log_every: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # sampling
    w_pose: float = 2.0
    w_app: float = 2.0
    data_workers: int = 4

    def __post_init__(self):
        if not 0 <= self.drop_percent <= 100:
            raise ConfigError(f"drop_percent must lie in [0, 100], got {self.drop_percent}")
        # three UNet levels on the latent grid, four source encoder stages on the image
        multiple = math.lcm(ENCODER_STRIDE, self.downsample_factor * 4)
        if self.image_size % multiple:
            raise ConfigError(f"image_size must be divisible by {multiple}, got {self.image_size}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"Unknown prompt_mode: {self.prompt_mode}. Available prompt_modes: {list(PROMPT_MODES)}")
        if 2 ** (len(self.codec_channels) - 1) != self.downsample_factor:
            raise ConfigError(
                f"codec_channels needs log2(downsample_factor) + 1 = "
                f"{int(math.log2(self.downsample_factor)) + 1} entries, got {len(self.codec_channels)}"
            )
        if len(self.encoder_channels) != 4:
            raise ConfigError(f"encoder_channels needs 4 stages, got {self.encoder_channels}")
        if len(self.unet_channels) != 3 or len(self.hga_feature_map) != 3:
            raise ConfigError("unet_channels and hga_feature_map need exactly 3 entries")
        if not set(self.hga_feature_map) <= {1, 2, 3, 4}:
            raise ConfigError(f"hga_feature_map entries must be in 1..4, got {self.hga_feature_map}")
        if self.ddim_steps < 1 or self.ddim_steps > self.timesteps:
            raise ConfigError(f"ddim_steps must lie in [1, {self.timesteps}], got {self.ddim_steps}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    @property
    def prompt_tokens(self) -> int:
        """Token count of the prompt the UNet cross-attends to."""
        if self.prompt_mode == "prd":
            return self.prompt_queries
        grids = [self.image_size // (ENCODER_STRIDE >> level) for level in range(4)]
        if self.prompt_mode == "encoder":
            return grids[0] ** 2
        return sum(grid**2 for grid in grids)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.train_pairs / self.batch_size))

    @property
    def decay_step(self) -> int:
        return self.decay_epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    def to_lines(self) -> list[str]:
        return [f"{key}={format_value(value)}" for key, value in self.to_dict().items()]


# Presets; "full" is the full-size model and is only built in shape-only mode
PRESETS: Dict[str, CfldConfig] = {
    "desk": CfldConfig(),
    "full": CfldConfig(
        image_size=256,
        encoder_channels=(128, 256, 512, 1024),
        prompt_dim=768,
        decoder_blocks=8,
        attention_heads=8,
        appearance_layers=4,
        unet_channels=(320, 640, 1280),
        unet_layers_per_block=2,
        norm_groups=32,
        warmup_steps=1000,
        decay_epochs=50,
    ),
}


def full_scale_config() -> CfldConfig:
    return PRESETS["full"]


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw: str, field_type) -> object:
    raw = raw.strip()
    try:
        if typing.get_origin(field_type) is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if field_type is bool:
            lowered = raw.lower()
            if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(raw)
            return lowered in {"true", "1", "yes"}
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if field_type is str:
            return raw
    except ValueError as err:
        raise ConfigError(f"Bad value for {key}: {raw!r} ({field_type})") from err
    raise ConfigError(f"Unsupported config type for {key}: {field_type}")


def with_overrides(base: CfldConfig, overrides: Mapping[str, str | None]) -> CfldConfig:
    """Apply string overrides (from a file or `--set key=value`) to `base`."""
    types = {f.name: f.type for f in fields(CfldConfig)}
    values = {}
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"Unknown config key: {key}. Available keys: {sorted(types)}")
        if raw is None:
            raise ConfigError(f"Config key {key} has no value")
        values[key] = _coerce(key, raw, types[key])
    return replace(base, **values)


def parse_assignments(assignments: list[str]) -> dict[str, str]:
    parsed = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"Expected key=value, got {item!r}")
        parsed[key.strip()] = value
    return parsed


def config_from_dict(values: Mapping[str, object]) -> CfldConfig:
    """Inverse of `CfldConfig.to_dict` (as stored in checkpoint metadata)."""
    known = {f.name for f in fields(CfldConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}. Available keys: {sorted(known)}")
    return CfldConfig(**{key: tuple(value) if isinstance(value, list) else value for key, value in values.items()})


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
    preset: str = "desk",
) -> CfldConfig:
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset: {preset}. Available presets: {list(PRESETS)}")
    config = PRESETS[preset]
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        config = with_overrides(config, dotenv_values(path))
    if overrides:
        config = with_overrides(config, overrides)
    return config
