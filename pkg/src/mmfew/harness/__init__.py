from .config import ConfigError, ExperimentConfig
from .train import run_train
from .evaluation import run_eval
from .report import run_report

__all__ = ["ConfigError", "ExperimentConfig", "run_train", "run_eval", "run_report"]
