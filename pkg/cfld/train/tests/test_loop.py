import math

import numpy as np
import polars as pl
import pytest

from cfld.common.errors import TrainingError
from cfld.numkit import ops
from cfld.numkit.optim import Adam
from cfld.numkit.tensor import Tensor
from cfld.train.loop import apply_update, loss_frame, run_loop, stage_rng, write_loss_csv_task

COLUMNS = ["step", "loss", "lr"]


class TestStageRng:

    def test_stages_are_distinct(self):
        assert not np.array_equal(stage_rng(0, "codec").uniform(8), stage_rng(0, "cfld").uniform(8))

    def test_unknown_stage(self):
        with pytest.raises(ValueError, match="Unknown stage: vae"):
            stage_rng(0, "vae")


class TestApplyUpdate:

    def test_steps_on_objective(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"w": w})
        values = apply_update(optimizer, {"loss": ops.sum(w * w)}, "loss", 0.1, step=0, seed=0)
        assert values == {"loss": pytest.approx(1.0)}
        assert w.data[0] == pytest.approx(0.9, rel=1e-5)

    def test_non_finite_loss_raises_with_step_and_seed(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        optimizer = Adam({"w": w})
        loss = ops.sum(w * math.inf)
        with pytest.raises(TrainingError) as err:
            apply_update(optimizer, {"loss": loss}, "loss", 0.1, step=7, seed=3)
        assert err.value.step == 7
        assert err.value.seed == 3
        np.testing.assert_array_equal(w.data, [1.0])


class TestRunLoop:

    def test_rows_and_learning_rates(self):
        seen = []

        def update(step, lr):
            seen.append((step, lr))
            return {"loss": float(step)}

        rows = run_loop("test", update, 2, 5, lambda step: step * 0.1, log_every=1)
        assert seen == [(2, pytest.approx(0.3)), (3, pytest.approx(0.4)), (4, pytest.approx(0.5))]
        assert [row["step"] for row in rows] == [3, 4, 5]
        assert rows[0]["loss"] == 2.0

    def test_checkpoints_before_the_last_step(self):
        saved = []
        run_loop("test", lambda step, lr: {"loss": 0.0}, 0, 6, lambda _: 1.0, 0, saved.append, checkpoint_every=2)
        assert saved == [2, 4]

    def test_empty_range(self):
        assert run_loop("test", lambda step, lr: {}, 4, 4, lambda _: 1.0) == []


class TestWriteLossCsv:

    def test_writes_columns(self, tmp_path):
        path = write_loss_csv_task.fn([{"step": 1, "loss": 0.5, "lr": 1e-3}], tmp_path / "loss.csv", COLUMNS)
        frame = pl.read_csv(path)
        assert frame.columns == COLUMNS
        assert frame["step"].to_list() == [1]

    def test_empty_rows_write_header(self, tmp_path):
        assert loss_frame([], COLUMNS).columns == COLUMNS

    def test_append_continues_and_replaces_overlap(self, tmp_path):
        path = tmp_path / "loss.csv"
        first = [{"step": s, "loss": 1.0, "lr": 0.1} for s in (1, 2, 3)]
        second = [{"step": s, "loss": 2.0, "lr": 0.1} for s in (3, 4)]
        write_loss_csv_task.fn(first, path, COLUMNS)
        write_loss_csv_task.fn(second, path, COLUMNS, append=True)
        frame = pl.read_csv(path)
        assert frame["step"].to_list() == [1, 2, 3, 4]
        assert frame["loss"].to_list() == [1.0, 1.0, 2.0, 2.0]

    def test_without_append_overwrites(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_loss_csv_task.fn([{"step": 1, "loss": 1.0, "lr": 0.1}], path, COLUMNS)
        write_loss_csv_task.fn([{"step": 5, "loss": 1.0, "lr": 0.1}], path, COLUMNS)
        assert pl.read_csv(path)["step"].to_list() == [5]
