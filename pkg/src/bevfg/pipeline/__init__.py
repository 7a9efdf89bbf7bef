"""Training orchestration: configuration, checkpoints, datasets, training loops and the CLI."""
from .checkpoint import Checkpoint
from .config import Config
from .data import AccessLog, SceneDataset, select_labeled
from .model import Network, StepDraws, Window
from .train import (
    TrainLog,
    compare_init,
    depth_to_pgm,
    evaluate,
    finetune,
    network_from_checkpoint,
    pretrain,
    render,
)

__all__ = [
    "AccessLog",
    "Checkpoint",
    "Config",
    "Network",
    "SceneDataset",
    "StepDraws",
    "TrainLog",
    "Window",
    "compare_init",
    "depth_to_pgm",
    "evaluate",
    "finetune",
    "network_from_checkpoint",
    "pretrain",
    "render",
    "select_labeled",
]
