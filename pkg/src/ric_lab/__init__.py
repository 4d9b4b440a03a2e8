"""Recurrent classifiers that refine a class distribution step by step.

Trained with policy gradients on a log-score improvement reward, next to
a single-pass supervised baseline, calibration metrics and numeric
checks of the underlying theory.
"""

from .agent import Agent, AgentConfig, init_params, load_checkpoint, save_checkpoint
from .taskgen import TaskSpec, generate
from .trainer import TrainConfig, train_ric, train_supervised

__all__ = ["Agent", "AgentConfig", "TaskSpec", "TrainConfig", "generate", "init_params",
           "load_checkpoint", "save_checkpoint", "train_ric", "train_supervised"]
__version__ = "0.1.0"
