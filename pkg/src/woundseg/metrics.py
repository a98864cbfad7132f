"""Segmentation metrics and the binary cross-entropy training loss."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
import io
import os
from typing import Iterable, Sequence

import numpy as np

from ._fs import atomic_write_text
from .errors import ContractError, ShapeError
from .tensor import Tensor, make_op, note_switch

EPSILON = 1e-6
THRESHOLD = 0.5
BCE_CLAMP = 1e-7

HISTORY_COLUMNS = (
    "epoch", "loss", "accuracy", "dice", "iou",
    "val_loss", "val_accuracy", "val_dice", "val_iou",
)


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = EPSILON
    threshold: float = THRESHOLD
    bce_clamp: float = BCE_CLAMP

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    loss: float
    accuracy: float
    dice: float
    iou: float

    def as_dict(self, prefix: str = "") -> dict[str, float]:
        return {prefix + k: v for k, v in asdict(self).items()}


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    """1 where ``prob > threshold`` (strict), else 0, as uint8."""
    p = np.asarray(getattr(prob, "data", prob))
    if p.size and (np.isnan(p).any() or p.min() < 0 or p.max() > 1):
        raise ContractError("binarize expects values in [0, 1]")
    return (p > threshold).astype(np.uint8)


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred).astype(bool)
    b = np.asarray(true).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred_bin, true_bin, eps: float = EPSILON) -> float:
    """``2 |A & B| / (|A| + |B| + eps)``."""
    a, b = _pair(pred_bin, true_bin)
    inter = np.count_nonzero(a & b)
    return 2.0 * inter / (np.count_nonzero(a) + np.count_nonzero(b) + eps)


def iou(pred_bin, true_bin, eps: float = EPSILON) -> float:
    """``|A & B| / (|A | B| + eps)``."""
    a, b = _pair(pred_bin, true_bin)
    inter = np.count_nonzero(a & b)
    return inter / (np.count_nonzero(a | b) + eps)


def confusion(pred_bin, true_bin) -> ConfusionCounts:
    a, b = _pair(pred_bin, true_bin)
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return ConfusionCounts(tp=tp, tn=int(a.size) - tp - fp - fn, fp=fp, fn=fn)


def pixel_accuracy(pred_bin, true_bin) -> tuple[float, ConfusionCounts]:
    c = confusion(pred_bin, true_bin)
    if c.total == 0:
        raise ContractError("pixel_accuracy of an empty mask")
    return (c.tp + c.tn) / c.total, c


def bce_value(prob, true, clamp: float = BCE_CLAMP) -> float:
    """Mean clamped binary cross-entropy as a plain float."""
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(true, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce: prediction {p.shape} vs target {y.shape}")
    p = np.clip(p, clamp, 1.0 - clamp)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_loss(prob: Tensor, true, clamp: float = BCE_CLAMP) -> Tensor:
    """Differentiable mean BCE; zero gradient where ``prob`` is clamped."""
    y = np.asarray(getattr(true, "data", true), dtype=prob.dtype)
    if prob.shape != y.shape:
        raise ShapeError(f"bce: prediction {prob.shape} vs target {y.shape}")
    pd = prob.data
    lo, hi = prob.dtype.type(clamp), prob.dtype.type(1.0 - clamp)
    ph = np.clip(pd, lo, hi)
    inside = (pd >= lo) & (pd <= hi)
    note_switch(inside)
    n = pd.size
    value = -np.mean(y * np.log(ph) + (1 - y) * np.log(1 - ph))

    def bw(g):
        d = -(y / ph - (1 - y) / (1 - ph)) / n
        return ((g * d * inside).astype(pd.dtype),)

    return make_op(np.asarray(value, dtype=pd.dtype), (prob,), bw, "bce")


def batch_scores(prob: np.ndarray, true: np.ndarray, cfg: MetricConfig = MetricConfig()):
    """Per-image (accuracy, dice, iou) lists for a batch of maps."""
    pred = binarize(prob, cfg.threshold)
    true = np.asarray(true) > 0.5
    acc, dsc, jac = [], [], []
    for p, t in zip(pred, true):
        acc.append(pixel_accuracy(p, t)[0])
        dsc.append(dice(p, t, cfg.epsilon))
        jac.append(iou(p, t, cfg.epsilon))
    return acc, dsc, jac


def _predict(model, images):
    if hasattr(model, "predict"):
        return np.asarray(model.predict(images))
    return np.asarray(model(images))


def evaluate(model, dataset: Iterable, config: MetricConfig = MetricConfig()) -> MetricsReport:
    """Per-image metrics on binarized predictions, averaged over images.

    ``dataset`` yields ``(images, masks)`` batches. The loss is the BCE
    averaged over every pixel of every image.
    """
    acc, dsc, jac = [], [], []
    loss_sum, pixels = 0.0, 0
    for images, masks in dataset:
        prob = _predict(model, images)
        masks = np.asarray(masks).reshape(prob.shape)
        loss_sum += bce_value(prob, masks, config.bce_clamp) * prob.size
        pixels += prob.size
        a, d, j = batch_scores(prob, masks, config)
        acc += a
        dsc += d
        jac += j
    if not acc:
        raise ContractError("evaluate: empty dataset")
    return MetricsReport(
        loss=loss_sum / pixels,
        accuracy=float(np.mean(acc)),
        dice=float(np.mean(dsc)),
        iou=float(np.mean(jac)),
    )


def history_row(epoch: int, train: MetricsReport, val: MetricsReport) -> dict:
    row = {"epoch": epoch}
    row.update(train.as_dict())
    row.update(val.as_dict("val_"))
    return row


def history_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items() if k in HISTORY_COLUMNS})
    return buf.getvalue()


def write_history_csv(rows: Sequence[dict], path: str | os.PathLike) -> None:
    atomic_write_text(path, history_csv(rows))
