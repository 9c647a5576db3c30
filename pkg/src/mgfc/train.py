"""Training and evaluation loops over the synthetic benchmark.

Predictions and labels live at patch resolution: ground-truth pixel labels
are reduced to one label per patch by majority vote before scoring.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .backbone import MGFCModel
from .data import read_checkpoint, write_checkpoint
from .errors import IntegrityError
from .seghead import ConfusionMatrix, cross_entropy, miou, predict_pixel_logits


def patch_labels(labels: np.ndarray, patch: int) -> np.ndarray:
    """Majority-vote label per non-overlapping patch, flattened row-major."""
    n = labels.shape[0]
    g = n // patch
    blocks = labels.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, -1)
    out = np.empty(g * g, dtype=np.int64)
    for i, block in enumerate(blocks):
        out[i] = np.bincount(block).argmax()
    return out


def sample_logits(model: MGFCModel, image: np.ndarray) -> T.Tensor:
    fmap, q = model.forward(image)
    return predict_pixel_logits(q, fmap, model.head)


def evaluate(model: MGFCModel,
             samples: list[tuple[np.ndarray, np.ndarray]]) -> ConfusionMatrix:
    patch = model.cfg.backbone.patch
    cm = ConfusionMatrix(model.cfg.num_classes)
    for image, labels in samples:
        logits = sample_logits(model, image)
        pred = logits.data.argmax(axis=1)
        cm.update(patch_labels(labels, patch), pred)
    return cm


def train(model: MGFCModel, samples: list[tuple[np.ndarray, np.ndarray]],
          iters: int, batch: int, lr: float, weight_decay: float,
          out_dir: str | None = None, checkpoint_every: int = 500,
          metrics_path: str | None = None) -> list[dict]:
    """AdamW over the trainable parameters only; the frozen-encoder hash is
    asserted unchanged at the end of the run.

    Returns the per-iteration metrics records (also written as JSON lines
    when ``metrics_path`` is given).
    """
    params = model.trainable_params()
    opt = T.AdamW(params, lr=lr, weight_decay=weight_decay)
    hash_before = model.frozen_hash()
    patch = model.cfg.backbone.patch
    records: list[dict] = []
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    try:
        cursor = 0
        for it in range(iters):
            opt.zero_grad()
            cm = ConfusionMatrix(model.cfg.num_classes)
            total_loss = None
            for _ in range(batch):
                image, labels = samples[cursor % len(samples)]
                cursor += 1
                logits = sample_logits(model, image)
                truth = patch_labels(labels, patch)
                loss = cross_entropy(logits, truth)
                cm.update(truth, logits.data.argmax(axis=1))
                total_loss = loss if total_loss is None else total_loss + loss
            mean_loss = total_loss * T.Tensor(1.0 / batch)
            mean_loss.backward()
            opt.step()
            per_class, mean_iou = miou(cm)
            record = {"iter": it,
                      "loss": float(mean_loss.data.reshape(())),
                      "miou": mean_iou,
                      "per_class": [None if np.isnan(x) else float(x)
                                    for x in per_class]}
            records.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
            if out_dir and (it + 1) % checkpoint_every == 0:
                write_checkpoint(os.path.join(out_dir, f"ckpt_{it + 1}.mgc"),
                                 params, hash_before)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if model.frozen_hash() != hash_before:
        raise IntegrityError("frozen encoder changed during training")
    if out_dir:
        write_checkpoint(os.path.join(out_dir, "ckpt_final.mgc"),
                         params, hash_before)
    return records


def load_into_model(model: MGFCModel, checkpoint_path: str) -> None:
    state = read_checkpoint(checkpoint_path, expected_hash=model.frozen_hash())
    state.pop("__frozen_hash__")
    model.load_state(state)
