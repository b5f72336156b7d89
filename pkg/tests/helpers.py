"""Shared oracles and harness utilities for the test suite.

Everything here is deliberately written straight from definitions, as
independent reference implementations: explicit loops instead of the
vectorized forms used in the package.
"""

from __future__ import annotations

import numpy as np

from promptpix.autodiff import Tensor


def param_probe_fn(tensor: Tensor, compute_loss):
    """Adapt a model-parameter loss to grad_check's f(Tensor) signature.

    grad_check differentiates its own probe tensor; this wrapper routes the
    graph through the probe by temporarily aliasing the parameter's data
    and grad buffers to the probe's.
    """

    def f(x: Tensor):
        saved = (tensor.data, tensor.grad, tensor.requires_grad)
        tensor.data, tensor.grad, tensor.requires_grad = x.data, x.grad, x.requires_grad
        try:
            return compute_loss()
        finally:
            tensor.data, tensor.grad, tensor.requires_grad = saved

    return f


def lloyd_reference(features: np.ndarray, init_centers: np.ndarray, iters: int):
    """Plain hard k-means: argmin assignment (lowest index on ties), then
    per-cluster means; empty clusters keep their previous center."""
    centers = init_centers.copy()
    labels = None
    for _ in range(iters):
        d = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d, axis=1)
        for i in range(centers.shape[0]):
            members = features[labels == i]
            if len(members):
                centers[i] = members.mean(axis=0)
    return centers, labels


# ---------------------------------------------------------------------------
# straight-from-definition metric references (loop-based)
# ---------------------------------------------------------------------------

def ref_counts(pred_hard: np.ndarray, gt: np.ndarray):
    tp = fp = fn = tn = 0
    for p, g in zip(pred_hard.reshape(-1), gt.reshape(-1)):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def ref_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    hard = (np.asarray(pred, dtype=float) >= 0.5).astype(int)
    tp, fp, fn, _ = ref_counts(hard, gt.astype(int))
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def ref_miou(pred: np.ndarray, gt: np.ndarray) -> float:
    hard = (np.asarray(pred, dtype=float) >= 0.5).astype(int)
    tp, fp, fn, tn = ref_counts(hard, gt.astype(int))
    iou_fg = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    iou_bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    return (iou_fg + iou_bg) / 2


def ref_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    hard = (np.asarray(pred, dtype=float) >= 0.5).astype(int)
    tp, fp, fn, tn = ref_counts(hard, gt.astype(int))
    return (tp + tn) / gt.size


def ref_mae(pred: np.ndarray, gt: np.ndarray) -> float:
    total = 0.0
    for p, g in zip(np.asarray(pred, float).reshape(-1), gt.reshape(-1)):
        total += abs(p - g)
    return total / gt.size


def ref_s_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Structure measure, written directly from its definition.

    S = 0.5 * S_object + 0.5 * S_region; all-background masks score
    1 - mean(pred), all-foreground masks score mean(pred). Population
    (divide-by-N) standard deviations and covariances; clipped to [0, 1].
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mu = gt.mean()
    if mu == 0:
        return float(np.clip(1.0 - pred.mean(), 0, 1))
    if mu == 1:
        return float(np.clip(pred.mean(), 0, 1))

    eps = 1e-12

    def object_score(vals):
        if vals.size == 0:
            return 0.0
        x = vals.mean()
        sigma = np.sqrt(((vals - x) ** 2).mean())
        return 2 * x / (x * x + 1 + sigma + eps)

    s_obj = mu * object_score(pred[gt == 1]) + (1 - mu) * object_score((1 - pred)[gt == 0])

    rows, cols = gt.shape
    total = gt.sum()
    i = np.arange(1, cols + 1)
    j = np.arange(1, rows + 1)
    cx = int(round(float((gt.sum(axis=0) * i).sum() / total)))
    cy = int(round(float((gt.sum(axis=1) * j).sum() / total)))

    def ssim(p, g):
        n = p.size
        if n == 0:
            return 1.0
        x, y = p.mean(), g.mean()
        vx = ((p - x) ** 2).sum() / n
        vy = ((g - y) ** 2).sum() / n
        cov = ((p - x) * (g - y)).sum() / n
        alpha = 4 * x * y * cov
        beta = (x * x + y * y) * (vx + vy)
        if alpha != 0:
            return alpha / (beta + eps)
        return 1.0 if beta == 0 else 0.0

    s_reg = 0.0
    for rs, cs in (
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, cols)),
        (slice(cy, rows), slice(0, cx)),
        (slice(cy, rows), slice(cx, cols)),
    ):
        block_g = gt[rs, cs]
        s_reg += (block_g.size / gt.size) * ssim(pred[rs, cs], block_g)

    return float(np.clip(0.5 * s_obj + 0.5 * s_reg, 0, 1))


def ref_e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced-alignment measure on the binarized map: the mean over
    pixels of ((2 phi_fm phi_gt / (phi_fm^2 + phi_gt^2)) + 1)^2 / 4,
    with degenerate all-one/all-zero masks scored by plain agreement."""
    fm = (np.asarray(pred, dtype=float) >= 0.5).astype(float)
    gt = np.asarray(gt, dtype=float)
    h, w = gt.shape
    if gt.sum() == 0:
        vals = 1.0 - fm
    elif gt.sum() == gt.size:
        vals = fm
    else:
        mfm, mgt = fm.mean(), gt.mean()
        vals = np.empty_like(gt)
        for r in range(h):
            for c in range(w):
                a = fm[r, c] - mfm
                b = gt[r, c] - mgt
                align = 2 * a * b / (a * a + b * b + 1e-12)
                vals[r, c] = (align + 1) ** 2 / 4
    total = 0.0
    for v in vals.reshape(-1):
        total += v
    return total / gt.size
