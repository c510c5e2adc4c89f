"""
CFLD training on the train pairs [0, N): L_overall = L_mse + L_rec.

Starts from a backbone checkpoint, or resumes a CFLD checkpoint written by this flow. A resumed
run restores the weights, the Adam moments and the step counter; since batch randomness is keyed
by step, it ends bit-identical to an uninterrupted run with the same total step count.

Writes the checkpoint (every `checkpoint_every` steps and at the end) and the loss curve
`step,mse,rec,overall,lr`.
"""

from pathlib import Path

from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE

from cfld.common import services
from cfld.common.errors import CheckpointError
from cfld.diffusion.schedule import VarianceSchedule
from cfld.extract.dataset import PairArrays, split_indices
from cfld.extract.export_data import build_pairs_flow
from cfld.models.cfld_model import CfldModel, load_model, restore_optimizer, save_model, trainable_parameters
from cfld.numkit.optim import Adam
from cfld.train.loop import CheckpointFn, run_loop, write_loss_csv_task
from cfld.train.objective import lr_schedule, sample_batch, training_step

LOSS_COLUMNS = ["step", "mse", "rec", "overall", "lr"]


def make_optimizer(model: CfldModel) -> Adam:
    config = model.config
    return Adam(
        trainable_parameters(model), config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps
    )


def fit_cfld(
    model: CfldModel,
    optimizer: Adam,
    data: PairArrays,
    start: int,
    stop: int,
    on_checkpoint: CheckpointFn | None = None,
) -> list[dict[str, float]]:
    """Run CFLD steps [start, stop) on `data`."""
    config = model.config
    sched = VarianceSchedule.linear(config.timesteps, config.beta_start, config.beta_end)

    def update(step: int, lr: float) -> dict[str, float]:
        return training_step(model, optimizer, sample_batch(data, config, step), sched, lr)

    return run_loop(
        "cfld",
        update,
        start,
        stop,
        lambda step: lr_schedule(step, config),
        config.log_every,
        on_checkpoint=on_checkpoint,
        checkpoint_every=config.checkpoint_every,
    )


def prepare(checkpoint: Path, resume: bool) -> tuple[CfldModel, Adam, int]:
    """Model, optimiser and first step for a fresh or resumed run."""
    model, stored = load_model(checkpoint, stage="cfld")
    optimizer = make_optimizer(model)
    if not resume:
        return model, optimizer, 0
    if stored.metadata.get("stage") != "cfld":
        raise CheckpointError(f"Cannot resume from a {stored.metadata.get('stage')!r} checkpoint: {checkpoint}")
    restore_optimizer(optimizer, stored)
    return model, optimizer, int(stored.metadata.get("step", 0))


@task(name="fit_cfld", cache_policy=NO_CACHE)
def fit_cfld_task(
    model: CfldModel,
    optimizer: Adam,
    data: PairArrays,
    start: int,
    stop: int,
    output: Path,
) -> list[dict[str, float]]:
    logger = get_run_logger()
    logger.info(f"Training CFLD steps {start}..{stop} on {len(data)} pairs")

    def checkpoint(step: int) -> None:
        save_model(output, model, step=step, optimizer=optimizer)
        logger.info(f"Checkpoint at step {step}: {output}")

    return fit_cfld(model, optimizer, data, start, stop, on_checkpoint=checkpoint)


@flow(name="train_cfld", persist_result=False)
def train_cfld_flow(
    checkpoint: Path,
    output: Path,
    steps: int | None = None,
    resume: bool = False,
    loss_csv: Path | None = None,
) -> Path:
    """
    Train CFLD up to `steps` total steps.

    Args:
        checkpoint: Backbone checkpoint, or a CFLD checkpoint when `resume` is set
        output: Checkpoint path written during and after training
        steps: Total step count (default: `train_steps` of the recorded config)
        resume: Continue from the step, weights and optimiser state stored in `checkpoint`
        loss_csv: Loss curve path (default: next to the output checkpoint)
    """
    logger = get_run_logger()
    output = Path(output)
    model, optimizer, start = prepare(Path(checkpoint), resume)
    config = model.config
    stop = config.train_steps if steps is None else steps
    if start >= stop:
        logger.warning(f"Checkpoint is already at step {start} >= {stop}; nothing to train")

    pairs = build_pairs_flow(config.seed, list(split_indices(config, "train")), config.image_size)
    rows = fit_cfld_task(model, optimizer, PairArrays.stack(pairs), start, stop, output)
    write_loss_csv_task(rows, loss_csv or output.with_suffix(".loss.csv"), LOSS_COLUMNS, append=resume)
    path = save_model(output, model, step=max(start, stop), optimizer=optimizer)
    logger.info(f"Saved CFLD checkpoint at step {max(start, stop)} to {path}")
    return path


if __name__ == "__main__":
    data = services.data_dir()
    train_cfld_flow(checkpoint=data / "backbone.cfld", output=data / "model.cfld")
