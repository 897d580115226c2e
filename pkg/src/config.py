import logging
import os
from functools import lru_cache
from pathlib import Path

import yaml

REPO_ROOT = Path(__file__).resolve().parent.parent
LOG_LEVEL_ENV = "SLICING_LOG_LEVEL"


@lru_cache()
def load_config(config_path: str | Path = REPO_ROOT / "config.yml") -> dict:
    with open(config_path, "r") as f:
        config = yaml.safe_load(f)
    return config


def configure_logging(config: dict | None = None) -> None:
    """Set up root logging from the `logging` section; the env var wins for the level."""
    config = config if config is not None else load_config()
    log_config = config.get("logging", {})
    level = os.getenv(LOG_LEVEL_ENV, log_config.get("level", "INFO")).upper()
    logging.basicConfig(
        level=level,
        format=log_config.get("format", "%(asctime)s %(levelname)s %(name)s: %(message)s"),
    )


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)
