"""Query-based segmentation head, pixel cross-entropy, and mIoU metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tuners import FeatureMap


@dataclass
class HeadParams:
    w_cls: T.Tensor   # c_q x num_classes
    b_cls: T.Tensor   # 1 x num_classes

    @staticmethod
    def create(c_q: int, num_classes: int, rng: np.random.Generator,
               scale: float = 0.5) -> "HeadParams":
        return HeadParams(
            w_cls=T.Tensor(rng.normal(0.0, scale, (c_q, num_classes)),
                           requires_grad=True),
            b_cls=T.Tensor(rng.normal(0.0, scale, (1, num_classes)),
                           requires_grad=True))

    def named(self, prefix: str = "head") -> dict[str, T.Tensor]:
        return {f"{prefix}.w_cls": self.w_cls, f"{prefix}.b_cls": self.b_cls}


def predict_pixel_logits(q: T.Tensor, fmap: FeatureMap, p: HeadParams) -> T.Tensor:
    """Attention readout: pixels attend over queries, and each query carries a
    class-logit vector; pixel logits are the attention-weighted mix."""
    c_q = q.data.shape[1]
    if fmap.channels != c_q:
        raise ShapeError(
            f"feature channels {fmap.channels} != query width {c_q}")
    scale = T.Tensor(1.0 / math.sqrt(c_q))
    attn = T.softmax_rows((fmap.values @ q.T) * scale)      # HW x m
    class_logits = q @ p.w_cls + p.b_cls                     # m x C
    return attn @ class_logits


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean pixel cross-entropy via a stabilized log-softmax."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    hw, num_classes = logits.data.shape
    if labels.shape[0] != hw:
        raise ShapeError(f"{labels.shape[0]} labels for {hw} pixels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels outside [0, {num_classes}): [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((hw, num_classes))
    onehot[np.arange(hw), labels] = 1.0
    log_probs = T.log_softmax_rows(logits)
    picked = T.tsum(log_probs * T.Tensor(onehot))
    return -picked * T.Tensor(1.0 / hw)


class ConfusionMatrix:
    """C x C counts, rows = ground truth, cols = prediction. Additive across
    shards, so evaluation can merge per-worker matrices."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> None:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ShapeError(f"truth {truth.shape} vs pred {pred.shape}")
        flat = truth * self.num_classes + pred
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2).reshape(self.counts.shape)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        if self.total == 0:
            raise DataError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and the mean over classes present in truth or prediction.

    Returns (per_class, mean); absent classes carry NaN in per_class and are
    excluded from the mean.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise DataError("miou: all-zero confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    return per_class, float(np.nanmean(per_class[present]))
