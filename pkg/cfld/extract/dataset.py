"""
Synthetic pose-transfer pairs.

A pair is one sampled appearance rendered at two sampled poses. Pair `index` under `seed`
draws from substream `index` of `Rng(seed)`, so pairs are independent of each other and of
the order or thread they are generated in.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from cfld.common.config import CfldConfig
from cfld.extract.poses import PoseSpec, sample_pose
from cfld.extract.render import AppearanceSpec, render_person, render_pose, sample_appearance
from cfld.numkit.rng import Rng

# Codec/backbone pretraining images come from indices far above any train/test range
PRETRAIN_OFFSET = 1_000_000


@dataclass(frozen=True)
class SamplePair:
    x_s: np.ndarray  # source image
    x_sp: np.ndarray  # source pose map
    x_tp: np.ndarray  # target pose map
    x_g: np.ndarray  # ground truth: source appearance in the target pose
    seed: int
    index: int
    appearance: AppearanceSpec
    source_pose: PoseSpec
    target_pose: PoseSpec

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "appearance": self.appearance.to_dict(),
            "source_pose": self.source_pose.to_dict(),
            "target_pose": self.target_pose.to_dict(),
        }


def gen_pair(seed: int, index: int, image_size: int = 64) -> SamplePair:
    rng = Rng(seed).substream(index)
    appearance = sample_appearance(rng.substream(0))
    source_pose = sample_pose(rng.substream(1))
    target_pose = sample_pose(rng.substream(2))
    return SamplePair(
        x_s=render_person(source_pose, appearance, image_size, image_size),
        x_sp=render_pose(source_pose, image_size, image_size),
        x_tp=render_pose(target_pose, image_size, image_size),
        x_g=render_person(target_pose, appearance, image_size, image_size),
        seed=seed,
        index=index,
        appearance=appearance,
        source_pose=source_pose,
        target_pose=target_pose,
    )


def split_indices(config: CfldConfig, split: str) -> range:
    """Index range of a split: train [0, N), test [N, N + M), pretrain (codec/backbone)."""
    ranges = {
        "train": range(0, config.train_pairs),
        "test": range(config.train_pairs, config.train_pairs + config.test_pairs),
        "pretrain": range(PRETRAIN_OFFSET, PRETRAIN_OFFSET + config.codec_images // 2),
    }
    if split not in ranges:
        raise ValueError(f"Unknown split: {split}. Available splits: {list(ranges)}")
    return ranges[split]


def make_pairs(seed: int, indices: Iterable[int], image_size: int = 64) -> list[SamplePair]:
    return [gen_pair(seed, index, image_size) for index in indices]


@dataclass(frozen=True)
class PairArrays:
    """Stacked [N, 3, H, W] arrays of a list of pairs."""

    x_s: np.ndarray
    x_sp: np.ndarray
    x_tp: np.ndarray
    x_g: np.ndarray

    @classmethod
    def stack(cls, pairs: Sequence[SamplePair]) -> "PairArrays":
        if not pairs:
            raise ValueError("Cannot stack an empty list of pairs")
        return cls(
            x_s=np.stack([p.x_s for p in pairs]),
            x_sp=np.stack([p.x_sp for p in pairs]),
            x_tp=np.stack([p.x_tp for p in pairs]),
            x_g=np.stack([p.x_g for p in pairs]),
        )

    def __len__(self) -> int:
        return len(self.x_s)

    def take(self, indices: np.ndarray) -> "PairArrays":
        return PairArrays(self.x_s[indices], self.x_sp[indices], self.x_tp[indices], self.x_g[indices])


def images_of(pairs: Sequence[SamplePair]) -> np.ndarray:
    """Every person image (sources and ground truths) as one [2N, 3, H, W] array."""
    return np.stack([image for p in pairs for image in (p.x_s, p.x_g)])
