from .data import Dataset, epoch_batches, make_dataset, shard, train_test_split
from .distributed import (
    METRIC_COLUMNS,
    StepResult,
    TrainConfig,
    TrainResult,
    distributed_step,
    train,
    train_worker,
)
from .models import MLP, LogisticRegression, Model, make_model
from .optim import LAMB, SGD, Adam, ConstantLR, LinearWarmupDecay, Momentum, make_optimizer, trust_ratio

__all__ = [
    "LAMB",
    "METRIC_COLUMNS",
    "MLP",
    "SGD",
    "Adam",
    "ConstantLR",
    "Dataset",
    "LinearWarmupDecay",
    "LogisticRegression",
    "Model",
    "Momentum",
    "StepResult",
    "TrainConfig",
    "TrainResult",
    "distributed_step",
    "epoch_batches",
    "make_dataset",
    "make_model",
    "make_optimizer",
    "shard",
    "train",
    "train_test_split",
    "train_worker",
    "trust_ratio",
]
