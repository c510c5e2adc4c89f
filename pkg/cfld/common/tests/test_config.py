"""Tests for run configuration loading and overrides."""

import pytest

from cfld.common.config import (
    PRESETS,
    CfldConfig,
    config_from_dict,
    load_config,
    parse_assignments,
    with_overrides,
)
from cfld.common.errors import ConfigError


class TestCfldConfig:

    def test_desk_defaults(self):
        config = PRESETS["desk"]
        assert config.image_size == 64
        assert config.latent_size == 16
        assert config.drop_percent == 20.0
        assert config.w_pose == config.w_app == 2.0

    def test_decay_step_counts_epochs(self):
        config = CfldConfig(train_pairs=16, batch_size=4, decay_epochs=10)
        assert config.steps_per_epoch == 4
        assert config.decay_step == 40

    def test_drop_percent_range(self):
        with pytest.raises(ConfigError):
            CfldConfig(drop_percent=120.0)

    def test_codec_channels_must_match_downsample_factor(self):
        with pytest.raises(ConfigError, match="codec_channels"):
            CfldConfig(codec_channels=(8, 8))

    @pytest.mark.parametrize("size", [40, 48, 80])
    def test_image_size_fits_the_source_encoder(self, size):
        with pytest.raises(ConfigError, match="divisible by 32"):
            CfldConfig(image_size=size)

    def test_larger_downsample_factor_raises_the_multiple(self):
        with pytest.raises(ConfigError, match="divisible by 64"):
            CfldConfig(image_size=96, downsample_factor=16, codec_channels=(8, 8, 8, 8, 8))
        assert CfldConfig(image_size=128, downsample_factor=16, codec_channels=(8, 8, 8, 8, 8)).latent_size == 8

    def test_prompt_mode_is_checked(self):
        with pytest.raises(ConfigError, match="Available prompt_modes"):
            CfldConfig(prompt_mode="clip")

    @pytest.mark.parametrize(("mode", "tokens"), [("prd", 16), ("encoder", 4), ("multiscale", 256 + 64 + 16 + 4)])
    def test_prompt_tokens(self, mode, tokens):
        assert CfldConfig(prompt_mode=mode).prompt_tokens == tokens

    def test_lines_round_trip_through_overrides(self):
        config = CfldConfig(seed=3, prenorm=False, unet_channels=(8, 16, 16), prompt_mode="encoder", use_hga=False, train_query=True)
        values = dict(line.split("=", 1) for line in config.to_lines())
        assert with_overrides(CfldConfig(), values) == config


class TestOverrides:

    def test_typed_values(self):
        config = with_overrides(
            CfldConfig(), {"seed": "7", "learning_rate": "0.5", "independent_drop": "true", "hga_feature_map": "2,3,4"}
        )
        assert config.seed == 7
        assert config.learning_rate == 0.5
        assert config.independent_drop is True
        assert config.hga_feature_map == (2, 3, 4)

    def test_unknown_key_lists_available_keys(self):
        with pytest.raises(ConfigError, match="Unknown config key: nope"):
            with_overrides(CfldConfig(), {"nope": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="seed"):
            with_overrides(CfldConfig(), {"seed": "abc"})

    def test_parse_assignments(self):
        assert parse_assignments(["seed=4", "w_pose = 1.5"]) == {"seed": "4", "w_pose": " 1.5"}
        with pytest.raises(ConfigError):
            parse_assignments(["seed"])

    def test_config_from_dict_accepts_checkpoint_metadata(self):
        stored = CfldConfig(seed=9).to_dict()
        stored["unet_channels"] = list(stored["unet_channels"])
        assert config_from_dict(stored) == CfldConfig(seed=9)

    def test_config_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            config_from_dict({"seed": 1, "colour": "red"})


class TestLoadConfig:

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk run\nseed=5\nddim_steps=10\n")
        config = load_config(path, {"seed": "6"})
        assert config.seed == 6
        assert config.ddim_steps == 10

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.cfg")

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Available presets"):
            load_config(preset="huge")

    def test_full_preset(self):
        config = load_config(preset="full")
        assert config.image_size == 256
        assert config.prompt_dim == 768

    def test_toggles_from_overrides(self):
        config = load_config(overrides={"use_hga": "false", "prompt_mode": "multiscale", "train_query": "yes", "prenorm": "0"})
        assert config.use_hga is False
        assert config.prompt_mode == "multiscale"
        assert config.train_query is True
        assert config.prenorm is False
