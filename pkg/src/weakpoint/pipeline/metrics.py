"""Intersection-over-union bookkeeping; ground truth -1 is ignored."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    intersection: np.ndarray
    union: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> Metrics:
        return cls(np.zeros(num_classes, dtype=np.int64), np.zeros(num_classes, dtype=np.int64))

    def update(self, predicted, truth) -> Metrics:
        pred = np.asarray(predicted, dtype=np.int64).reshape(-1)
        gt = np.asarray(truth, dtype=np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"{pred.size} predictions for {gt.size} labels")
        keep = gt >= 0
        pred, gt = pred[keep], gt[keep]
        n = len(self.intersection)
        if np.any((pred < 0) | (pred >= n)):
            raise ValueError("prediction outside the class range")
        confusion = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        tp = np.diag(confusion)
        self.intersection += tp
        self.union += confusion.sum(axis=0) + confusion.sum(axis=1) - tp
        return self

    @property
    def present(self) -> np.ndarray:
        """Classes that occur in the ground truth or the predictions."""
        return self.union > 0

    @property
    def iou(self) -> np.ndarray:
        out = np.full(len(self.union), np.nan)
        m = self.present
        out[m] = self.intersection[m] / self.union[m]
        return out

    @property
    def miou(self) -> float:
        """Mean IoU over classes with a non-empty union."""
        if not self.present.any():
            return float("nan")
        return float(np.nanmean(self.iou))

    def to_dict(self, class_names=None) -> dict:
        iou = self.iou
        names = class_names or [str(k) for k in range(len(iou))]
        return {
            "miou": self.miou,
            "per_class_iou": {names[k]: (None if np.isnan(iou[k]) else float(iou[k])) for k in range(len(iou))},
            "intersection": [int(v) for v in self.intersection],
            "union": [int(v) for v in self.union],
        }


def evaluate_labels(predicted, truth, num_classes: int) -> Metrics:
    return Metrics.empty(num_classes).update(predicted, truth)
