"""Grant-free NOMA link-level simulator with learned PIC receivers and classical baselines."""

__version__ = "0.1.0"

from .config import SystemConfig, TrainConfig, ConfigError, parse_config

__all__ = ["SystemConfig", "TrainConfig", "ConfigError", "parse_config", "__version__"]
