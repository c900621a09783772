"""Task metrics: mean IoU over a dataset-level confusion matrix, and
pixel-count-pooled RMSE for depth."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .features import DEPTH, IGNORE_ID, SEGMENTATION


@dataclass
class EvalReport:
    task: str
    miou: float | None = None
    per_class_iou: np.ndarray | None = None  # nan where a class was absent
    rmse: float | None = None
    pixels_evaluated: int = 0
    pixels_ignored: int = 0
    confusion: np.ndarray | None = None

    def to_text(self) -> str:
        """Line-oriented key=value report."""
        lines = [f"task={self.task}",
                 f"pixels_evaluated={self.pixels_evaluated}",
                 f"pixels_ignored={self.pixels_ignored}"]
        if self.task == SEGMENTATION:
            lines.append(f"miou={self.miou:.6f}")
            for c, iou in enumerate(self.per_class_iou):
                value = "absent" if np.isnan(iou) else f"{iou:.6f}"
                lines.append(f"iou_class_{c}={value}")
        else:
            lines.append(f"rmse={self.rmse:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for line in self.to_text().strip().split("\n"):
            key, value = line.split("=", 1)
            buf.write(f"{key},{value}\n")
        return buf.getvalue()


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_id: int = IGNORE_ID) -> np.ndarray:
    """num_classes x num_classes counts, rows = ground truth, cols = pred."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs labels {gt.shape}")
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if np.any(g >= num_classes) or np.any(p >= num_classes):
        raise ValueError(f"class id out of range for {num_classes} classes")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


def mean_iou(pred_maps, gt_maps, num_classes: int,
             ignore_id: int = IGNORE_ID) -> EvalReport:
    """Mean IoU from one confusion matrix accumulated over all images.

    IoU_c = TP / (TP + FP + FN).  Classes never seen in either prediction or
    ground truth are excluded from the mean (reported as nan).
    """
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    ignored = 0
    total = 0
    for pred, gt in zip(pred_maps, gt_maps, strict=True):
        conf += confusion_matrix(pred, gt, num_classes, ignore_id)
        ignored += int(np.count_nonzero(gt == ignore_id))
        total += gt.size
    evaluated = total - ignored
    if evaluated == 0:
        raise ValueError("mIoU undefined: zero evaluated pixels (all ignored)")
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return EvalReport(SEGMENTATION, miou=float(np.nanmean(iou)),
                      per_class_iou=iou, pixels_evaluated=int(evaluated),
                      pixels_ignored=int(ignored), confusion=conf)


def rmse_depth(pred_maps, gt_maps, valid_masks) -> EvalReport:
    """Root-mean-square error over valid pixels, pooled across images by
    pixel count (equivalent to RMSE on the concatenated pixel set)."""
    sq_sum = 0.0
    n_valid = 0
    n_total = 0
    for pred, gt, valid in zip(pred_maps, gt_maps, valid_masks, strict=True):
        if pred.shape != gt.shape or pred.shape != valid.shape:
            raise ShapeMismatchError(
                f"prediction {pred.shape}, labels {gt.shape}, mask {valid.shape}")
        diff = (pred.astype(np.float64) - gt.astype(np.float64))[valid]
        sq_sum += float(np.sum(diff * diff))
        n_valid += int(np.count_nonzero(valid))
        n_total += valid.size
    if n_valid == 0:
        raise ValueError("RMSE undefined: zero valid pixels")
    return EvalReport(DEPTH, rmse=float(np.sqrt(sq_sum / n_valid)),
                      pixels_evaluated=n_valid, pixels_ignored=n_total - n_valid)
