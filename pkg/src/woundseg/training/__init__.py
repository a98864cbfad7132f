"""Optimizer, callbacks, data generator and the epoch loop."""

from .callbacks import (
    CallbackState,
    CheckpointError,
    EarlyStopping,
    ModelCheckpoint,
    ReduceLROnPlateau,
    checkpoint,
    early_stopping,
    end_of_epoch,
    reduce_lr_on_plateau,
)
from .data import DataGenerator, load_pair, resize_image, resize_mask
from .loop import EpochLog, TrainConfig, TrainingError, TrainResult, train, train_epoch
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "CallbackState", "CheckpointError", "DataGenerator", "EarlyStopping", "EpochLog",
    "ModelCheckpoint", "ReduceLROnPlateau", "TrainConfig", "TrainResult", "TrainingError", "adam_step",
    "checkpoint", "early_stopping", "end_of_epoch", "load_pair", "reduce_lr_on_plateau", "resize_image",
    "resize_mask", "train", "train_epoch",
]
