"""Report rendering: matplotlib figures written next to delimited output."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curves(records: list[dict], path: str) -> None:
    """Loss and mIoU against iteration, from the JSON-lines metric records."""
    iters = [r["iter"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(iters, [r["loss"] for r in records], color="tab:red")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("cross-entropy loss")
    ax2.plot(iters, [r["miou"] for r in records], color="tab:blue")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train mIoU")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_eval_report(out_dir: str, class_names, per_class: np.ndarray,
                      mean_iou: float, accuracy: float, domain: str) -> None:
    """CSV with one row per class plus a bar-chart figure of the same numbers."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for name, iou in zip(class_names, per_class):
            writer.writerow([name, "" if np.isnan(iou) else f"{iou:.6f}"])
        writer.writerow(["mean", f"{mean_iou:.6f}"])
        writer.writerow(["pixel_accuracy", f"{accuracy:.6f}"])

    fig, ax = plt.subplots(figsize=(5, 3.2))
    values = [0.0 if np.isnan(v) else v for v in per_class]
    ax.bar(range(len(class_names)), values, color="tab:blue")
    ax.axhline(mean_iou, color="tab:red", linestyle="--",
               label=f"mIoU = {mean_iou:.3f}")
    ax.set_xticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=20)
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.set_title(f"per-class IoU ({domain})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "per_class_iou.png"), dpi=120)
    plt.close(fig)
