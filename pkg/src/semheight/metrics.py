"""Segmentation accuracy and compute accounting."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class IoUReport:
    per_class: np.ndarray  # NaN for classes absent from both prediction and truth
    present: np.ndarray
    mean: float
    num_evaluated: int


def mean_iou(pred, gt, num_classes=None, mask=None):
    """Per-class IoU and their mean over classes present in either input."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if mask is not None:
        pred, gt = pred[mask], gt[mask]
    pred = pred.ravel().astype(np.int64)
    gt = gt.ravel().astype(np.int64)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    cm = cm.reshape(num_classes, num_classes)
    inter = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    per_class = np.full(num_classes, np.nan)
    per_class[present] = inter[present] / union[present]
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return IoUReport(per_class, present, mean, int(gt.size))


@dataclass
class CostReport:
    """Labeller work and wall-clock per pipeline; counts are exact."""

    view_pixel_evaluations: int = 0
    map_pixel_evaluations: int = 0
    stage_seconds: dict = field(default_factory=dict)

    def add_time(self, stage, seconds):
        self.stage_seconds[stage] = self.stage_seconds.get(stage, 0.0) + seconds


def view_pixel_evaluations(num_frames, image_width, image_height):
    return num_frames * image_width * image_height


def map_pixel_evaluations(num_passes, plan):
    return num_passes * plan.pixel_evaluations()
