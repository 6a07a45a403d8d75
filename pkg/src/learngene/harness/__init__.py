"""Run configuration, file formats, baselines, and scripted experiments."""

from learngene.harness.checkpoint import (
    CheckpointError,
    inspect_checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from learngene.harness.config import ConfigError, RunConfig, load_config, save_config
from learngene.harness.metrics import MetricsRow, emit_metrics, read_metrics

__all__ = [
    "CheckpointError",
    "ConfigError",
    "MetricsRow",
    "RunConfig",
    "emit_metrics",
    "inspect_checkpoint",
    "load_config",
    "read_checkpoint",
    "read_metrics",
    "save_config",
    "write_checkpoint",
]
