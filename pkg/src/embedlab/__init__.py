"""Desk-scale lab for embedding-table optimizers and multi-epoch overfitting."""

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Invalid experiment, dataset, or model configuration."""


class DataIntegrityError(RuntimeError):
    """On-disk data does not match what the configuration expects."""
