import logging
import os
from pathlib import Path

import dotenv
from prefect import get_run_logger
from prefect.exceptions import MissingContextError
from prefect.logging import get_logger

from cfld.common.config import CfldConfig, load_config

dotenv.load_dotenv()


def logger() -> logging.Logger | logging.LoggerAdapter:
    """Run logger inside a flow or task, the package logger anywhere else."""
    try:
        return get_run_logger()
    except MissingContextError:
        return get_logger("cfld")


def data_dir() -> Path:
    """Root for generated artefacts (checkpoints, CSVs, PNGs)."""
    return Path(os.getenv("CFLD_DATA_DIR", "data"))


def worker_count(config: CfldConfig | None = None) -> int:
    value = os.getenv("CFLD_WORKERS")
    if value is None:
        return config.data_workers if config is not None else 4
    try:
        return max(1, int(value))
    except ValueError as err:
        raise ValueError(f"CFLD_WORKERS must be an integer, got {value!r}") from err


def config_path() -> Path | None:
    """Default config file, named by CFLD_CONFIG."""
    value = os.getenv("CFLD_CONFIG")
    return Path(value) if value else None


def config_from_env(overrides: dict[str, str] | None = None) -> CfldConfig:
    """Config from the CFLD_CONFIG file (if set) plus overrides."""
    return load_config(config_path(), overrides)
