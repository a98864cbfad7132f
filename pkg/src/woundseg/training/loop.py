"""Epoch loop: BCE + Adam over shuffled batches, validation, callbacks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .._fs import atomic_write_text
from ..metrics import MetricConfig, MetricsReport, batch_scores, bce_loss, evaluate, history_row, write_history_csv
from ..tensor import Tape, Tensor, backward
from ..weights import load_weights
from .callbacks import CallbackState, end_of_epoch
from .data import DataGenerator
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    stop_patience: int = 10
    seed: int = 0
    target_hw: int = 256
    eval_train: bool = False
    stop_at_train_dice: float | None = None

    def __post_init__(self):
        for name in ("lr0", "batch_size", "max_epochs", "plateau_patience", "stop_patience", "target_hw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")


@dataclass
class EpochLog:
    epoch: int
    train: MetricsReport
    val: MetricsReport
    lr: float
    saved: bool = False
    train_eval: MetricsReport | None = None

    def row(self) -> dict:
        return history_row(self.epoch, self.train, self.val)


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int | None
    stopped_epoch: int | None
    checkpoint: Path
    saved_epochs: list[int] = field(default_factory=list)
    lr_reductions: list[int] = field(default_factory=list)


def train_epoch(model, gen: DataGenerator, epoch: int, opt: AdamState, metric_cfg: MetricConfig) -> MetricsReport:
    """One pass over ``gen``; returns running (train-mode) metrics."""
    model.train()
    params = model.parameters()
    loss_sum, pixels = 0.0, 0
    acc, dsc, jac = [], [], []
    for b, (images, masks) in enumerate(gen.epoch(epoch)):
        model.zero_grad()
        with Tape() as tape:
            prob = model(Tensor(images))
            loss = bce_loss(prob, masks, metric_cfg.bce_clamp)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch} batch {b} (lr {opt.lr})")
        backward(loss, tape)
        adam_step(params, {k: p.grad for k, p in params.items()}, opt)
        loss_sum += value * prob.size
        pixels += prob.size
        a, d, j = batch_scores(prob.data, masks, metric_cfg)
        acc += a
        dsc += d
        jac += j
    return MetricsReport(loss_sum / pixels, float(np.mean(acc)), float(np.mean(dsc)), float(np.mean(jac)))


def _report_dict(r: MetricsReport | None):
    return None if r is None else asdict(r)


def train(model, train_gen: DataGenerator, val_gen: DataGenerator, config: TrainConfig,
          out_dir: str | os.PathLike, metric_cfg: MetricConfig = MetricConfig()) -> TrainResult:
    """Run the full protocol, writing ``best.futw``, ``history.csv`` and ``run.json``.

    The model holds the best (lowest validation loss) weights on return.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.futw"
    run_path = out / "run.json"
    cb = CallbackState.create(
        config.lr0, ckpt, model.save, config.plateau_patience, config.plateau_factor, config.stop_patience
    )
    opt = AdamState(lr=config.lr0)
    provenance = {
        "train_config": asdict(config),
        "model_config": model.config.to_dict(),
        "metric_config": asdict(metric_cfg),
        "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "train_items": len(train_gen.index),
        "val_items": len(val_gen.index),
    }
    atomic_write_text(run_path, json.dumps(provenance, indent=2))

    history: list[EpochLog] = []
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        lr_used = opt.lr
        train_rep = train_epoch(model, train_gen, epoch, opt, metric_cfg)
        val_rep = evaluate(model, val_gen.epoch(0), metric_cfg)
        train_eval = evaluate(model, train_gen.epoch(0), metric_cfg) if config.eval_train else None
        saved, lr, stopped = end_of_epoch(cb, epoch, val_rep.loss)
        opt.lr = lr
        history.append(EpochLog(epoch, train_rep, val_rep, lr_used, saved, train_eval))
        write_history_csv([h.row() for h in history], out / "history.csv")
        log.info(
            "epoch %d loss %.5f dice %.4f val_loss %.5f val_dice %.4f lr %.2e",
            epoch, train_rep.loss, train_rep.dice, val_rep.loss, val_rep.dice, lr_used,
        )
        if stopped:
            break
        score = (train_eval or train_rep).dice
        if config.stop_at_train_dice is not None and score >= config.stop_at_train_dice:
            break

    cb.restore(lambda p: model.load_state_dict(load_weights(p)))
    model.eval()
    provenance.update(
        epochs_run=len(history),
        best_epoch=cb.stopper.best_epoch,
        stopped_epoch=cb.stopper.stopped_epoch,
        saved_epochs=cb.checkpoint.saved_epochs,
        lr_reductions=cb.plateau.reductions,
        history=[
            {"epoch": h.epoch, "lr": h.lr, "saved": h.saved, "train": asdict(h.train), "val": asdict(h.val),
             "train_eval": _report_dict(h.train_eval)}
            for h in history
        ],
    )
    atomic_write_text(run_path, json.dumps(provenance, indent=2))
    return TrainResult(history, cb.stopper.best_epoch, cb.stopper.stopped_epoch, ckpt,
                       list(cb.checkpoint.saved_epochs), list(cb.plateau.reductions))
