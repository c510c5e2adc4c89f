from unittest.mock import MagicMock, patch

import polars as pl
import pytest

from cfld.diffusion.schedule import DdimPlan
from cfld.evaluate.evaluate import evaluate_flow, evaluate_pair_task, report_frame, write_report_task
from cfld.models.cfld_model import CfldModel, save_model
from cfld.sample.guidance import GuidanceWeights

ROWS = [{"index": "4", "psnr": 10.0, "ssim": 0.2}, {"index": "5", "psnr": 14.0, "ssim": 0.4}]


class TestReport:

    def test_mean_row_is_last(self):
        frame = report_frame(ROWS)
        assert frame["index"].to_list() == ["4", "5", "mean"]
        assert frame.row(-1, named=True) == {"index": "mean", "psnr": 12.0, "ssim": pytest.approx(0.3)}

    def test_write_report(self, tmp_path):
        write_report_task.fn(ROWS, tmp_path / "out" / "report.csv")
        frame = pl.read_csv(tmp_path / "out" / "report.csv")
        assert frame.columns == ["index", "psnr", "ssim"]
        assert len(frame) == 3


class TestEvaluatePair:

    def test_scores_generated_image(self, tiny_config):
        model = CfldModel(tiny_config)
        row = evaluate_pair_task.fn(4, model, GuidanceWeights(), DdimPlan.even(50, 1), seed=0)
        assert row["index"] == "4"
        assert 0.0 < row["psnr"] <= 99.0
        assert -1.0 <= row["ssim"] <= 1.0


class TestEvaluateFlow:

    def test_scores_the_test_split(self, tmp_path, tiny_config):
        checkpoint = save_model(tmp_path / "model.cfld", CfldModel(tiny_config))
        futures = MagicMock()
        futures.result.return_value = ROWS
        with (
            patch("cfld.evaluate.evaluate.evaluate_pair_task") as pair_task,
            patch("cfld.evaluate.evaluate.write_report_task") as write,
        ):
            pair_task.map.return_value = futures
            path = evaluate_flow.fn(checkpoint, tmp_path / "report.csv", steps=2)

        assert path == tmp_path / "report.csv"
        assert pair_task.map.call_args.args[0] == [4, 5]
        assert len(pair_task.map.call_args.kwargs["plan"].value) == 2
        write.assert_called_once_with(ROWS, tmp_path / "report.csv")

    def test_pair_limit_and_train_split(self, tmp_path, tiny_config):
        checkpoint = save_model(tmp_path / "model.cfld", CfldModel(tiny_config))
        with (
            patch("cfld.evaluate.evaluate.evaluate_pair_task") as pair_task,
            patch("cfld.evaluate.evaluate.write_report_task"),
        ):
            evaluate_flow.fn(checkpoint, tmp_path / "report.csv", pairs=3, split="train")
        assert pair_task.map.call_args.args[0] == [0, 1, 2]
