"""
Configuration management for Watermark Lab.

Process-level settings come from environment variables (prefix
WATERMARK_LAB_) or a .env file. Experiment definitions are YAML documents
validated into ExperimentConfig; the snapshot hash recorded with every run is
the SHA-256 of the raw config bytes.
"""

import hashlib
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Union

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings

from .errors import ConfigurationError
from .models.experiment import ExperimentConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    log_level: str = "INFO"
    output_dir: str = "runs"

    # Size caps for exact constructions
    enumeration_cap: int = 100_000
    graph_vertex_cap: int = 10_000
    eigen_cap: int = 2000

    # Trial fan-out; results never depend on it
    workers: int = 1

    default_seed: int = 0

    class Config:
        env_prefix = "WATERMARK_LAB_"
        env_file = ".env"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def format_validation_error(error: ValidationError) -> str:
    """One line per problem, each prefixed with its dotted field path."""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"])
        message = item["msg"].removeprefix("Value error, ")
        lines.append(f"{path}: {message}" if path else message)
    return "\n".join(lines)


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def parse_experiment_config(data: Any) -> ExperimentConfig:
    """
    Validate a parsed config document.

    Raises:
        ConfigurationError: With field-path messages for every problem
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config document must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e)) from e


def load_experiment_config(path: Union[str, Path]) -> tuple[ExperimentConfig, str, bytes]:
    """
    Read and validate a YAML experiment config.

    Args:
        path: Config file path

    Returns:
        Tuple of (config, sha256 of the file bytes, raw bytes)

    Raises:
        ConfigurationError: If the file is missing, is not YAML, or fails validation
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: invalid YAML: {e}") from e
    config = parse_experiment_config(data)
    logger.info(f"Loaded config {path} (sha256 {config_hash(raw)[:12]})")
    return config, config_hash(raw), raw


def apply_overrides(config: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """
    Re-validate a config with command-line overrides applied.

    Overrides that are None are ignored. The dump stays in python mode so
    non-finite floats such as an infinite tie band survive re-validation. The
    snapshot hash keeps referring to the config bytes; the record stores the
    effective seed separately.
    """
    updates = {name: value for name, value in overrides.items() if value is not None}
    if not updates:
        return config
    return parse_experiment_config({**config.model_dump(), **updates})


def inline_config(data: dict[str, Any]) -> tuple[ExperimentConfig, str, bytes]:
    """Validate an in-memory config; its hash is taken over the canonical JSON dump."""
    raw = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return parse_experiment_config(data), config_hash(raw), raw
