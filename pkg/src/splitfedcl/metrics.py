"""Segmentation metrics from pixel confusion counts.

All scores are corpus-micro: counts are summed over every pixel of every
test image before any ratio is formed. Class 0 is background; Dice loss,
precision and recall are micro-averaged over the foreground classes, while
mean IoU averages the per-class IoU of all classes, background included.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .nn import forward_split

FIELDS = ("accuracy", "dice_loss", "mean_iou", "precision", "recall")


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    dice_loss: float
    mean_iou: float
    per_class_iou: tuple[float, ...]
    precision: float
    recall: float

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in FIELDS}
        for c, v in enumerate(self.per_class_iou):
            row[f"iou_{c}"] = v
        return row

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float, empty: float) -> float:
    return float(num) / float(den) if den > 0 else empty


def confusion_counts(pred: np.ndarray, label: np.ndarray, n_classes: int):
    """Per-class one-vs-rest (TP, FP, FN) and the number of correct pixels."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    cm = np.bincount(label.ravel() * n_classes + pred.ravel(), minlength=n_classes * n_classes)
    cm = cm.reshape(n_classes, n_classes)  # rows: truth, cols: prediction
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn, int(tp.sum()), int(cm.sum())


def metrics_from_counts(tp, fp, fn, correct: int, total: int) -> MetricSet:
    """Build a MetricSet from accumulated counts.

    A class absent from both prediction and truth scores IoU 1, and an
    empty foreground scores Dice loss 0 with precision and recall 1.
    """
    tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
    iou = tuple(_ratio(t, t + p + n, 1.0) for t, p, n in zip(tp, fp, fn))
    ftp, ffp, ffn = tp[1:].sum(), fp[1:].sum(), fn[1:].sum()
    dice = 1.0 - _ratio(2 * ftp, 2 * ftp + ffp + ffn, 1.0)
    return MetricSet(
        accuracy=_ratio(correct, total, 0.0),
        dice_loss=dice,
        mean_iou=float(np.mean(iou)),
        per_class_iou=iou,
        precision=_ratio(ftp, ftp + ffp, 1.0),
        recall=_ratio(ftp, ftp + ffn, 1.0),
    )


def score(pred: np.ndarray, label: np.ndarray, n_classes: int) -> MetricSet:
    return metrics_from_counts(*confusion_counts(pred, label, n_classes))


def evaluate(params, images: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> MetricSet:
    """Hard argmax predictions of ``params`` on a test set, scored corpus-micro."""
    if len(images) == 0:
        raise ShapeError("evaluation needs at least one test image")
    n_classes = params.be[-1].shape[0]
    tp = np.zeros(n_classes, np.int64)
    fp = np.zeros(n_classes, np.int64)
    fn = np.zeros(n_classes, np.int64)
    correct = total = 0
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        probs, _ = forward_split(params, x)
        counts = confusion_counts(probs.argmax(axis=1), labels[start:start + batch_size], n_classes)
        tp += counts[0]
        fp += counts[1]
        fn += counts[2]
        correct += counts[3]
        total += counts[4]
    return metrics_from_counts(tp, fp, fn, correct, total)
