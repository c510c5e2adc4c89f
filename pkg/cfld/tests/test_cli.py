import json
from unittest.mock import patch

import pytest

from cfld.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_config
from cfld.common.errors import CheckpointError


@pytest.fixture(autouse=True)
def no_env_config(monkeypatch):
    monkeypatch.delenv("CFLD_CONFIG", raising=False)


class TestDefaults:

    def test_prints_every_key(self, capsys):
        assert main(["defaults"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "seed=0" in lines
        assert "image_size=64" in lines
        assert "unet_channels=32,64,64" in lines

    def test_full_preset(self, capsys):
        main(["defaults", "--preset", "full"])
        assert "prompt_dim=768" in capsys.readouterr().out.splitlines()


class TestResolveConfig:

    def parse(self, *argv):
        return build_parser().parse_args(["defaults", *argv])

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("# run settings\nseed=3\nbatch_size=2\n")
        assert resolve_config(self.parse("--config", str(path))).seed == 3
        assert resolve_config(self.parse("--config", str(path), "--set", "seed=4")).seed == 4
        config = resolve_config(self.parse("--config", str(path), "--set", "seed=4", "--seed", "5"))
        assert config.seed == 5
        assert config.batch_size == 2

    def test_environment_names_the_config_file(self, tmp_path, monkeypatch):
        path = tmp_path / "run.env"
        path.write_text("drop_percent=10\n")
        monkeypatch.setenv("CFLD_CONFIG", str(path))
        assert resolve_config(self.parse()).drop_percent == 10.0


class TestExitCodes:

    def test_no_command_is_a_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert main(["sample", "--ckpt", "model.cfld"]) == EXIT_USAGE

    def test_bad_lambda_list(self):
        argv = ["interpolate", "--ckpt", "m", "--src-a", "a", "--src-b", "b", "--pose", "p", "--out", "o"]
        assert main([*argv, "--lam", "0,half"]) == EXIT_USAGE

    def test_help_is_success(self):
        assert main(["--help"]) == EXIT_OK

    def test_config_error_prints_json(self, capsys):
        assert main(["defaults", "--set", "bogus=1"]) == EXIT_FAILURE
        error = json.loads(capsys.readouterr().err.strip())
        assert error["error"] == "ConfigError"
        assert "bogus" in error["message"]

    def test_runtime_error_prints_json(self, capsys):
        with patch("cfld.sample.flows.sample_flow", side_effect=CheckpointError("truncated")):
            code = main(["sample", "--ckpt", "m.cfld", "--src", "s.png", "--out", "o.png"])
        assert code == EXIT_FAILURE
        assert json.loads(capsys.readouterr().err) == {"error": "CheckpointError", "message": "truncated"}


class TestDispatch:

    def test_sample_arguments(self):
        with patch("cfld.sample.flows.sample_flow") as flow:
            main(["sample", "--ckpt", "m.cfld", "--src", "s.png", "--out", "o.png", "--w-app", "1.5", "--ddim-steps", "5"])
        kwargs = flow.call_args.kwargs
        assert kwargs["pose"] is None
        assert kwargs["w_app"] == 1.5
        assert kwargs["w_pose"] is None
        assert kwargs["steps"] == 5

    def test_codec_steps_flag(self):
        with patch("cfld.train.pretrain_codec.pretrain_codec_flow") as flow:
            main(["pretrain-codec", "--out", "codec.cfld", "--steps", "12", "--seed", "9"])
        config = flow.call_args.kwargs["config"]
        assert config.codec_steps == 12
        assert config.seed == 9

    def test_interpolation_weights(self):
        with patch("cfld.sample.flows.interpolate_flow") as flow:
            argv = ["interpolate", "--ckpt", "m", "--src-a", "a", "--src-b", "b", "--pose", "p", "--out", "o"]
            main([*argv, "--lam", "0,0.5,1"])
        assert flow.call_args.kwargs["lams"] == [0.0, 0.5, 1.0]

    def test_resume_flag(self):
        with patch("cfld.train.train_cfld.train_cfld_flow") as flow:
            main(["train", "--ckpt", "model.cfld", "--out", "model.cfld", "--resume"])
        assert flow.call_args.kwargs["resume"] is True
