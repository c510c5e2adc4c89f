"""Pytest configuration and shared fixtures."""
import logging

import pytest

from cfld.common.config import CfldConfig


@pytest.fixture
def tiny_config():
    """Smallest configuration that keeps every module's shape contract (32x32 images, 8x8 latents)."""
    return CfldConfig(
        image_size=32,
        codec_channels=(8, 8, 8),
        encoder_channels=(8, 8, 16, 16),
        prompt_queries=4,
        prompt_dim=16,
        decoder_blocks=1,
        attention_heads=2,
        appearance_layers=1,
        unet_channels=(8, 16, 16),
        norm_groups=4,
        timesteps=50,
        ddim_steps=4,
        batch_size=2,
        train_pairs=4,
        test_pairs=2,
        codec_images=8,
        codec_batch=2,
        warmup_steps=2,
        decay_epochs=5,
        log_every=0,
    )


@pytest.fixture(autouse=True)
def _mock_prefect_logger():
    """Disable Prefect run loggers so get_run_logger() returns a null logger
    instead of raising MissingContextError outside a flow/task context."""
    flow_logger = logging.getLogger("prefect.flow_runs")
    task_logger = logging.getLogger("prefect.task_runs")
    flow_logger.disabled = True
    task_logger.disabled = True
    yield
    flow_logger.disabled = False
    task_logger.disabled = False


def pytest_addoption(parser):
    parser.addoption("--run-acceptance", action="store_true", help="run the end-to-end learning checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-acceptance"):
        return
    skip = pytest.mark.skip(reason="needs --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)
