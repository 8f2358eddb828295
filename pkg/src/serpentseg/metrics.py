"""Pixel-level segmentation metrics: IoU, precision, recall, F1, Hausdorff.

Degenerate cases follow the usual conventions: two empty masks count as a
perfect match (all ratio metrics 1, Hausdorff 0); a single empty mask scores 0
on any metric whose denominator vanishes and the image diagonal for Hausdorff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation


@dataclass
class ImageMetrics:
    iou: float
    precision: float
    recall: float
    f1: float
    hausdorff: float


METRIC_NAMES = ("iou", "precision", "recall", "f1", "hausdorff")


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics]
    mean: dict[str, float]
    std: dict[str, float]


def _check_mask(m: np.ndarray, role: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ContractViolation(f"{role} mask must be 2-d, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ContractViolation(f"{role} mask must be binary")
    return m.astype(np.uint8)


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    pred = _check_mask(pred, "pred")
    gt = _check_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt & 1))
    fn = int(np.count_nonzero(~pred & 1 & gt))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def pixel_metrics(counts) -> tuple[float, float, float, float]:
    tp, fp, fn, _ = counts
    if min(tp, fp, fn) < 0:
        raise ContractViolation(f"negative confusion counts {counts}")
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return iou, precision, recall, f1


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between positive-pixel sets, in pixels."""
    pred = _check_mask(pred, "pred")
    gt = _check_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ContractViolation(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = np.argwhere(pred).astype(np.float64)
    b = np.argwhere(gt).astype(np.float64)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return math.hypot(*pred.shape)
    return max(_directed(a, b), _directed(b, a))


def _directed(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    worst = 0.0
    for lo in range(0, len(a), chunk):
        block = a[lo:lo + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def evaluate_pair(pred, gt) -> ImageMetrics:
    iou, precision, recall, f1 = pixel_metrics(confusion_counts(pred, gt))
    return ImageMetrics(iou, precision, recall, f1, hausdorff(pred, gt))


def aggregate(per_image: list[ImageMetrics]) -> MetricsReport:
    """Arithmetic mean and population standard deviation per metric."""
    if not per_image:
        raise ContractViolation("aggregate needs at least one per-image report")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(m, name) for m in per_image], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    return MetricsReport(per_image, mean, std)


def report_tsv(report: MetricsReport) -> str:
    lines = ["index\t" + "\t".join(METRIC_NAMES)]
    for i, m in enumerate(report.per_image):
        lines.append(f"{i}\t" + "\t".join(f"{getattr(m, n):.6f}" for n in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def report_keyvalues(report: MetricsReport) -> str:
    lines = []
    for name in METRIC_NAMES:
        lines.append(f"{name}_mean = {report.mean[name]:.6f}")
        lines.append(f"{name}_std = {report.std[name]:.6f}")
    return "\n".join(lines) + "\n"
