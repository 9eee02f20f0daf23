"""Self-distilled masked auto-encoder for frame-level video anomaly detection."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, preset, validate_config

__all__ = ["ExperimentConfig", "load_config", "preset", "validate_config", "__version__"]
