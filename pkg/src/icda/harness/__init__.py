from .config import ConfigError, ExperimentConfig, load_config
from .training import run, run_seed

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "run", "run_seed"]
