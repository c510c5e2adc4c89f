"""
Generate synthetic pairs on worker threads, and export a split as PNG files.

Output layout under `<out>/<split>/`:

 - `{index}_src.png`, `{index}_srcpose.png`, `{index}_tgtpose.png`, `{index}_gt.png`
 - `index.json`: seed, image size, and per pair the appearance and both poses
"""

import json
from pathlib import Path

from prefect import flow, get_run_logger, task, unmapped
from prefect.cache_policies import NO_CACHE
from prefect.task_runners import ThreadPoolTaskRunner

from cfld.common import services
from cfld.common.checkpoint import atomic_write
from cfld.common.config import CfldConfig
from cfld.common.images import write_png
from cfld.extract.dataset import SamplePair, gen_pair, split_indices

PAIR_FILES = {
    "x_s": "src",
    "x_sp": "srcpose",
    "x_tp": "tgtpose",
    "x_g": "gt",
}


@task(name="gen_pair", cache_policy=NO_CACHE)
def gen_pair_task(index: int, seed: int, image_size: int) -> SamplePair:
    return gen_pair(seed, index, image_size)


@flow(name="build_pairs", persist_result=False, task_runner=ThreadPoolTaskRunner(max_workers=services.worker_count()))
def build_pairs_flow(seed: int, indices: list[int], image_size: int = 64) -> list[SamplePair]:
    """
    Render the pairs `indices` concurrently.

    Each pair draws from its own RNG substream, so the result does not depend on the worker count.
    """
    logger = get_run_logger()
    futures = gen_pair_task.map(list(indices), seed=unmapped(seed), image_size=unmapped(image_size))
    pairs = futures.result()
    logger.info(f"Generated {len(pairs)} pairs (seed={seed}, {image_size}x{image_size})")
    return pairs


@task(name="write_pairs", cache_policy=NO_CACHE)
def write_pairs_task(pairs: list[SamplePair], output_dir: Path, image_size: int) -> Path:
    """Write the four images of every pair plus the index file; returns the index path."""
    logger = get_run_logger()
    output_dir = Path(output_dir)
    for pair in pairs:
        for field_name, suffix in PAIR_FILES.items():
            write_png(output_dir / f"{pair.index}_{suffix}.png", getattr(pair, field_name))
    index = {
        "seed": pairs[0].seed if pairs else None,
        "image_size": image_size,
        "pairs": [pair.to_dict() for pair in pairs],
    }
    index_path = output_dir / "index.json"
    atomic_write(index_path, json.dumps(index, indent=2).encode("utf-8"))
    logger.info(f"Wrote {len(pairs)} pairs to {output_dir}")
    return index_path


@flow(name="export_data", persist_result=False)
def export_data_flow(config: CfldConfig, split: str, output_dir: Path, count: int | None = None) -> Path:
    """
    Export the pairs of one split (train, test or pretrain) as PNG files.

    `count` keeps only the first pairs of the split.
    """
    indices = list(split_indices(config, split))
    if count is not None:
        indices = indices[:count]
    pairs = build_pairs_flow(config.seed, indices, config.image_size)
    return write_pairs_task(pairs, Path(output_dir) / split, config.image_size)


if __name__ == "__main__":
    export_data_flow(config=services.config_from_env(), split="train", output_dir=services.data_dir() / "export")
