"""Segmentation quality metrics for one prediction/mask pair.

Overlap metrics (Dice, mIoU, accuracy) binarize the prediction at 0.5;
MAE is taken on the continuous map. The structure measure combines an
object-level term (foreground/background similarity around their means)
with a region-level term (SSIM-style similarity over the four blocks
around the mask centroid), weighted half and half. The enhanced-alignment
measure is the mean over pixels of the enhanced alignment between the
binarized prediction and the mask.

Conventions pinned here (the test-suite reference evaluator follows the
same ones): binarization is pred >= 0.5; standard deviations and
covariances use the population normalization (divide by N); empty/empty
overlaps count as perfect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import BinaryMask

_EPS = 1e-12


@dataclass
class MetricReport:
    dice: float
    miou: float
    mae: float
    accuracy: float
    s_measure: float
    e_measure: float

    def as_dict(self) -> dict:
        return {
            "dice": self.dice,
            "miou": self.miou,
            "mae": self.mae,
            "accuracy": self.accuracy,
            "s_measure": self.s_measure,
            "e_measure": self.e_measure,
        }


def _as_mask_array(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask):
        return mask.data.astype(np.float64)
    return np.asarray(mask, dtype=np.float64)


def evaluate(pred: np.ndarray, mask) -> MetricReport:
    """Score a continuous prediction map in [0, 1] against a binary mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = _as_mask_array(mask)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs mask {gt.shape}")

    hard = (pred >= 0.5).astype(np.float64)
    tp = float((hard * gt).sum())
    fp = float((hard * (1 - gt)).sum())
    fn = float(((1 - hard) * gt).sum())
    tn = float(((1 - hard) * (1 - gt)).sum())

    dice = 1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
    iou_fg = 1.0 if (tp + fp + fn) == 0 else tp / (tp + fp + fn)
    iou_bg = 1.0 if (tn + fp + fn) == 0 else tn / (tn + fp + fn)
    miou = 0.5 * (iou_fg + iou_bg)
    accuracy = (tp + tn) / gt.size
    mae = float(np.abs(pred - gt).mean())
    return MetricReport(
        dice=dice,
        miou=miou,
        mae=mae,
        accuracy=accuracy,
        s_measure=s_measure(pred, gt),
        e_measure=e_measure(hard, gt),
    )


# ---------------------------------------------------------------------------
# structure measure
# ---------------------------------------------------------------------------

def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """alpha * object similarity + (1 - alpha) * region similarity."""
    mu = gt.mean()
    if mu == 0.0:  # mask all background: reward empty predictions
        return float(np.clip(1.0 - pred.mean(), 0.0, 1.0))
    if mu == 1.0:  # mask all foreground
        return float(np.clip(pred.mean(), 0.0, 1.0))
    score = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


def _object_similarity(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std()
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = gt == 1
    o_fg = _object_similarity(pred[fg])
    o_bg = _object_similarity((1.0 - pred)[~fg])
    mu = gt.mean()
    return mu * o_fg + (1 - mu) * o_bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    # 1-based cut points; image center when the mask is empty
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return int(round(rows / 2)), int(round(cols / 2))
    i = np.arange(1, cols + 1)
    j = np.arange(1, rows + 1)
    cx = int(round((gt.sum(axis=0) * i).sum() / total))
    cy = int(round((gt.sum(axis=1) * j).sum() / total))
    return cy, cx


def _ssim_block(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 1.0
    x, y = pred.mean(), gt.mean()
    var_x = ((pred - x) ** 2).sum() / n
    var_y = ((gt - y) ** 2).sum() / n
    cov = ((pred - x) * (gt - y)).sum() / n
    alpha = 4.0 * x * y * cov
    beta = (x * x + y * y) * (var_x + var_y)
    if alpha != 0.0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0.0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    rows, cols = gt.shape
    cy, cx = _centroid(gt)
    area = rows * cols
    blocks = (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, cols)),
        (slice(cy, rows), slice(0, cx)),
        (slice(cy, rows), slice(cx, cols)),
    )
    score = 0.0
    for sl in blocks:
        g = gt[sl]
        w = g.size / area
        score += w * _ssim_block(pred[sl], g)
    return score


# ---------------------------------------------------------------------------
# enhanced-alignment measure
# ---------------------------------------------------------------------------

def e_measure(pred_binary: np.ndarray, gt: np.ndarray) -> float:
    """Mean enhanced alignment between a binarized map and the mask."""
    fm = np.asarray(pred_binary, dtype=np.float64)
    if gt.sum() == 0:  # all background: reward predicted background
        enhanced = 1.0 - fm
    elif (1 - gt).sum() == 0:  # all foreground
        enhanced = fm
    else:
        phi_fm = fm - fm.mean()
        phi_gt = gt - gt.mean()
        align = 2.0 * phi_fm * phi_gt / (phi_fm ** 2 + phi_gt ** 2 + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())
