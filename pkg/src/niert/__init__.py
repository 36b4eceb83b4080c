"""Transformer-based scattered-data interpolation with masked-value tokens,
partial self-attention, synthetic task generators, classical baselines, and a
verified gradient/optimizer core."""

from .model import ModelConfig, forward, init_params, load_checkpoint, loss, save_checkpoint
from .rng import RngStream
from .taskgen import InterpolationTask, generate_tasks, read_dataset, write_dataset
from .trainer import TrainConfig, evaluate, finetune, train

__version__ = "0.1.0"

__all__ = [
    "InterpolationTask", "ModelConfig", "RngStream", "TrainConfig",
    "evaluate", "finetune", "forward", "generate_tasks", "init_params",
    "load_checkpoint", "loss", "read_dataset", "save_checkpoint", "train",
    "__version__",
]
