"""Training, evaluation, prediction, gradient checking, ablations and the CLI."""
from .config import TrainConfig, load_config, lr_schedule, parse_config_text
from .trainer import Trainer, TrainResult, load_model, train

__all__ = ["TrainConfig", "Trainer", "TrainResult", "load_config", "load_model", "lr_schedule",
           "parse_config_text", "train"]
