"""
Step loop shared by the three training stages, plus the loss-curve CSV.

Each stage supplies an `update(step, lr)` callable that performs one optimiser update and
returns its loss values. Stage `name` draws the randomness of step `s` from
`stage_rng(seed, name).substream(s)`, so a run resumed at step `s` replays exactly.
"""

import math
from pathlib import Path
from typing import Callable, Mapping

import polars as pl
from prefect import task
from prefect.cache_policies import NO_CACHE

from cfld.common.errors import TrainingError
from cfld.common.services import logger
from cfld.numkit.optim import Adam
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, backward

# one top-level substream per stage, away from the model-init substreams
STAGE_STREAMS = {
    "codec": 101,
    "backbone": 102,
    "cfld": 103,
}

UpdateFn = Callable[[int, float], dict[str, float]]
CheckpointFn = Callable[[int], None]


def stage_rng(seed: int, stage: str) -> Rng:
    if stage not in STAGE_STREAMS:
        raise ValueError(f"Unknown stage: {stage}. Available stages: {list(STAGE_STREAMS)}")
    return Rng(seed).substream(STAGE_STREAMS[stage])


def apply_update(
    optimizer: Adam,
    losses: Mapping[str, Tensor],
    objective: str,
    lr: float,
    step: int,
    seed: int,
) -> dict[str, float]:
    """Check the losses are finite, backpropagate `losses[objective]` and step the optimiser."""
    values = {name: loss.item() for name, loss in losses.items()}
    if not all(math.isfinite(value) for value in values.values()):
        raise TrainingError(f"Non-finite loss {values}", step=step, seed=seed)
    backward(losses[objective])
    optimizer.step(lr)
    return values


def run_loop(
    label: str,
    update: UpdateFn,
    start: int,
    stop: int,
    lr_fn: Callable[[int], float],
    log_every: int = 50,
    on_checkpoint: CheckpointFn | None = None,
    checkpoint_every: int = 0,
) -> list[dict[str, float]]:
    """Run steps [start, stop); returns one row per step for the loss curve.

    The learning rate of step `s` is `lr_fn(s + 1)`, so the first update after warmup starts
    is already non-zero.
    """
    log = logger()
    rows = []
    for step in range(start, stop):
        lr = lr_fn(step + 1)
        values = update(step, lr)
        rows.append({"step": step + 1, **values, "lr": lr})
        done = step + 1
        if log_every and (done % log_every == 0 or done == stop):
            losses = " ".join(f"{name}={value:.5f}" for name, value in values.items())
            log.info(f"[{label}] step {done}/{stop} {losses} lr={lr:.2e}")
        if on_checkpoint is not None and checkpoint_every and done % checkpoint_every == 0 and done < stop:
            on_checkpoint(done)
    return rows


def loss_frame(rows: list[dict[str, float]], columns: list[str]) -> pl.DataFrame:
    schema = {name: pl.Int64 if name == "step" else pl.Float64 for name in columns}
    if not rows:
        return pl.DataFrame(schema=schema)
    return pl.DataFrame([{name: row[name] for name in columns} for row in rows], schema=schema)


@task(name="write_loss_csv", cache_policy=NO_CACHE)
def write_loss_csv_task(
    rows: list[dict[str, float]],
    path: Path,
    columns: list[str],
    append: bool = False,
) -> Path:
    """Write the loss curve; with `append`, rows continue an existing file (resumed runs)."""
    frame = loss_frame(rows, columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if append and path.exists():
        previous = pl.read_csv(path, schema=frame.schema)
        if len(frame):
            previous = previous.filter(pl.col("step") < frame["step"].min())
        frame = pl.concat([previous, frame])
    frame.write_csv(path)
    logger().info(f"Wrote {len(frame)} loss rows to {path}")
    return path
