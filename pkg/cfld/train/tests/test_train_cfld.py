from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from cfld.common.errors import CheckpointError
from cfld.extract.dataset import PairArrays, make_pairs
from cfld.models.cfld_model import CfldModel, load_model, save_model
from cfld.train.train_cfld import fit_cfld, make_optimizer, prepare, train_cfld_flow


@pytest.fixture
def pairs(tiny_config):
    return make_pairs(tiny_config.seed, range(tiny_config.train_pairs), tiny_config.image_size)


@pytest.fixture
def backbone_checkpoint(tmp_path, tiny_config):
    model = CfldModel(tiny_config)
    model.set_stage("backbone")
    return save_model(tmp_path / "backbone.cfld", model, step=0)


class TestFitCfld:

    def test_rows_carry_all_losses(self, pairs, tiny_config):
        model = CfldModel(tiny_config)
        rows = fit_cfld(model, make_optimizer(model), PairArrays.stack(pairs), 0, 2)
        assert [row["step"] for row in rows] == [1, 2]
        assert set(rows[0]) == {"step", "mse", "rec", "overall", "lr"}
        assert all(np.isfinite(row["overall"]) for row in rows)

    def test_checkpoint_callback(self, pairs, tiny_config):
        model = CfldModel(replace(tiny_config, checkpoint_every=1))
        saved = []
        fit_cfld(model, make_optimizer(model), PairArrays.stack(pairs), 0, 3, on_checkpoint=saved.append)
        assert saved == [1, 2]

    def test_resumed_run_matches_uninterrupted_run(self, tmp_path, pairs, tiny_config):
        data = PairArrays.stack(pairs)

        straight = CfldModel(tiny_config)
        fit_cfld(straight, make_optimizer(straight), data, 0, 4)

        interrupted = CfldModel(tiny_config)
        optimizer = make_optimizer(interrupted)
        fit_cfld(interrupted, optimizer, data, 0, 2)
        path = save_model(tmp_path / "half.cfld", interrupted, step=2, optimizer=optimizer)

        resumed, optimizer, start = prepare(path, resume=True)
        assert start == 2
        assert optimizer.t == 2
        fit_cfld(resumed, optimizer, data, start, 4)

        expected = straight.state_dict()
        for name, value in resumed.state_dict().items():
            np.testing.assert_array_equal(value, expected[name], err_msg=name)


class TestPrepare:

    def test_fresh_run_from_backbone(self, backbone_checkpoint):
        model, optimizer, start = prepare(backbone_checkpoint, resume=False)
        assert start == 0
        assert model.stage == "cfld"
        assert optimizer.t == 0
        assert set(optimizer.params) == set(model.partition.trainable)

    def test_cannot_resume_from_backbone(self, backbone_checkpoint):
        with pytest.raises(CheckpointError, match="backbone"):
            prepare(backbone_checkpoint, resume=True)


class TestTrainCfldFlow:

    def test_saves_at_final_step(self, tmp_path, pairs, backbone_checkpoint, tiny_config):
        output = tmp_path / "model.cfld"
        with (
            patch("cfld.train.train_cfld.build_pairs_flow", return_value=pairs) as build,
            patch("cfld.train.train_cfld.fit_cfld_task", return_value=[]) as fit,
            patch("cfld.train.train_cfld.write_loss_csv_task") as write,
        ):
            path = train_cfld_flow.fn(backbone_checkpoint, output, steps=3)

        build.assert_called_once_with(tiny_config.seed, [0, 1, 2, 3], 32)
        assert fit.call_args.args[3:5] == (0, 3)
        assert write.call_args.args[1] == tmp_path / "model.loss.csv"
        assert write.call_args.kwargs["append"] is False
        _, stored = load_model(path)
        assert stored.metadata["step"] == 3
        assert stored.metadata["stage"] == "cfld"
