"""Segmentation metrics: per-class IoU, mean IoU, and pixel accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    """K×K integer counts; rows index ground truth, columns prediction.

    Merging is elementwise addition, so per-scene matrices can be
    accumulated in any order.
    """

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(counts, dtype=np.int64)
            if self.counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts must be {num_classes}x{num_classes}")
            if (self.counts < 0).any():
                raise ValueError("counts must be non-negative")

    def add(self, truth, pred):
        truth = np.asarray(truth).ravel()
        pred = np.asarray(pred).ravel()
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction sizes differ")
        k = self.num_classes
        if truth.size and (truth.min() < 0 or truth.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"class indices must lie in 0..{k - 1}")
        flat = truth.astype(np.int64) * k + pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)

    def __add__(self, other):
        if self.num_classes != other.num_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    per_class_iou: list  # float per class, None where undefined (0/0)
    miou: float
    pixel_accuracy: float


def compute_metrics(conf: ConfusionMatrix) -> MetricsReport:
    """IoU_k = TP/(TP+FP+FN); classes absent from both truth and prediction
    are left out of the mean; PA = trace/total."""
    if conf.total == 0:
        raise ValueError("empty confusion matrix")
    c = conf.counts
    tp = np.diag(c).astype(np.float64)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    union = tp + fp + fn
    ious = []
    defined = []
    for k in range(conf.num_classes):
        if union[k] == 0:
            ious.append(None)
        else:
            v = tp[k] / union[k]
            ious.append(v)
            defined.append(v)
    if not defined:
        raise ValueError("no class present in truth or prediction")
    return MetricsReport(ious, float(np.mean(defined)), float(tp.sum() / conf.total))


def write_metrics_csv(path, report: MetricsReport, class_names) -> None:
    """CSV with header class,iou then one row per class plus miou and pa rows."""
    lines = ["class,iou"]
    for name, iou in zip(class_names, report.per_class_iou):
        lines.append(f"{name},{'nan' if iou is None else f'{iou:.6f}'}")
    lines.append(f"miou,{report.miou:.6f}")
    lines.append(f"pa,{report.pixel_accuracy:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
