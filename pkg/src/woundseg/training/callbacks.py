"""Checkpoint, plateau LR reduction and early stopping on validation loss.

All three use strict improvement (``val_loss < best``) with zero min-delta
and track their own best value, so their relative order within an epoch
does not change any decision. The training loop calls them as
checkpoint -> reduce LR -> early stop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
import os
from pathlib import Path
from typing import Callable


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelCheckpoint:
    path: Path
    save_fn: Callable[[Path], None]
    best: float = math.inf
    saved_epochs: list[int] = field(default_factory=list)

    def on_epoch_end(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            try:
                self.save_fn(Path(self.path))
            except OSError as exc:
                raise CheckpointError(f"could not write checkpoint {self.path}: {exc}") from exc
            self.saved_epochs.append(epoch)
            return True
        return False


@dataclass
class ReduceLROnPlateau:
    lr: float
    factor: float = 0.5
    patience: int = 10
    best: float = math.inf
    wait: int = 0
    reductions: list[int] = field(default_factory=list)

    def on_epoch_end(self, epoch: int, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
                self.reductions.append(epoch)
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 10
    best: float = math.inf
    wait: int = 0
    best_epoch: int | None = None
    stopped_epoch: int | None = None

    def on_epoch_end(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            self.best_epoch = epoch
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False


@dataclass
class CallbackState:
    """The three callbacks plus where the best weights live."""

    checkpoint: ModelCheckpoint
    plateau: ReduceLROnPlateau
    stopper: EarlyStopping

    @classmethod
    def create(cls, lr0: float, best_weights_path, save_fn, plateau_patience=10, plateau_factor=0.5,
               stop_patience=10) -> "CallbackState":
        return cls(
            ModelCheckpoint(Path(best_weights_path), save_fn),
            ReduceLROnPlateau(lr0, plateau_factor, plateau_patience),
            EarlyStopping(stop_patience),
        )

    @property
    def best_val_loss(self) -> float:
        return self.checkpoint.best

    @property
    def current_lr(self) -> float:
        return self.plateau.lr

    @property
    def best_weights_path(self) -> Path:
        return self.checkpoint.path

    def restore(self, load_fn: Callable[[Path], None]) -> None:
        path = self.best_weights_path
        if not os.path.exists(path):
            raise CheckpointError(f"no checkpoint at {path} to restore")
        load_fn(path)


def checkpoint(cb: CallbackState, epoch: int, val_loss: float) -> bool:
    return cb.checkpoint.on_epoch_end(epoch, val_loss)


def reduce_lr_on_plateau(cb: CallbackState, epoch: int, val_loss: float) -> float:
    return cb.plateau.on_epoch_end(epoch, val_loss)


def early_stopping(cb: CallbackState, epoch: int, val_loss: float) -> bool:
    return cb.stopper.on_epoch_end(epoch, val_loss)


def end_of_epoch(cb: CallbackState, epoch: int, val_loss: float) -> tuple[bool, float, bool]:
    """Run the trio in order; returns (saved, lr, stop)."""
    saved = checkpoint(cb, epoch, val_loss)
    lr = reduce_lr_on_plateau(cb, epoch, val_loss)
    stop = early_stopping(cb, epoch, val_loss)
    return saved, lr, stop
