from .checkpoint import (
    Checkpoint, CheckpointCompatibilityError, CheckpointFormatError, load_posterior, save_posterior,
)
from .config import ConfigError, ExperimentConfig, load, loads
from .metrics import MetricRecord, emit_metrics, read_metrics
from .runner import AccessViolation, NonFiniteLossError, run_experiment, sweep

__all__ = [
    "Checkpoint", "CheckpointCompatibilityError", "CheckpointFormatError", "load_posterior", "save_posterior",
    "ConfigError", "ExperimentConfig", "load", "loads",
    "MetricRecord", "emit_metrics", "read_metrics",
    "AccessViolation", "NonFiniteLossError", "run_experiment", "sweep",
]
