"""Differentiable soft clustering of pixels into superpixels.

Soft association Q[p, i] = exp(-||I_p - S_i||^2 / temp) between pixel
features and cluster centers. Each pixel's unit of mass is distributed
over clusters by a per-pixel (row) softmax; normalizing that mass per
cluster column gives the update weights Qhat, so centers move to
mass-weighted means S = Qhat^T I. As temp -> 0 the row softmax hardens
into nearest-center assignment and the update reduces to plain per-cluster
means, i.e. one Lloyd step.

The feature round trip pools per-pixel features into superpixel
descriptors and redistributes them back per pixel, which is the shape
prior the prompting stage consumes. Every step is built from taped ops, so
the whole map is differentiable with respect to the features and anything
they were computed from. All normalizations are softmaxes of -D/temp
(computed in log space), which stays finite at sharp temperatures where
raw exp(-D/temp) underflows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .images import PixelFeatures


class InvalidCountError(ValueError):
    """Requested superpixel count is not realizable for the image."""


@dataclass
class Centers:
    S: Tensor  # (m, 5) centers in scaled XYLab space
    iteration: int = 0

    @property
    def m(self) -> int:
        return self.S.data.shape[0]


@dataclass
class Association:
    Q: Tensor      # (n, m) raw soft association, entries in (0, 1]
    Qhat: Tensor   # (n, m) column-normalized Q
    n: int
    m: int
    # -D/temp, kept so row/column renormalizations stay stable at sharp temps
    logits: Tensor | None = field(default=None, repr=False)


@dataclass
class HardAssignment:
    labels: np.ndarray  # (n,) superpixel index per pixel

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def grid_shape(m: int, height: int, width: int) -> tuple[int, int]:
    """Factor pair gh*gw = m whose aspect is closest to the image's.

    Only pairs with gh <= height and gw <= width qualify (every grid cell
    must contain a pixel); if none exists the count is not realizable.
    """
    best = None
    target = np.log(height / width)
    for gh in range(1, m + 1):
        if m % gh:
            continue
        gw = m // gh
        if gh > height or gw > width:
            continue
        dist = abs(np.log(gh / gw) - target)
        if best is None or dist < best[0]:
            best = (dist, gh, gw)
    if best is None:
        raise InvalidCountError(
            f"{m} superpixels have no grid factorization fitting a {height}x{width} image"
        )
    return best[1], best[2]


def _band_edges(extent: int, parts: int) -> list[tuple[int, int]]:
    return [(extent * t // parts, extent * (t + 1) // parts) for t in range(parts)]


def init_centers(feats: PixelFeatures, m: int) -> Centers:
    """Mean feature of each cell of a gh x gw grid tiling the image."""
    n = feats.n
    if m < 1:
        raise InvalidCountError(f"need at least 1 superpixel, got {m}")
    if m > n:
        raise InvalidCountError(f"{m} superpixels exceed the {n} pixels available")
    gh, gw = grid_shape(m, feats.height, feats.width)
    pool = np.zeros((m, n))
    for i, (y0, y1) in enumerate(_band_edges(feats.height, gh)):
        for j, (x0, x1) in enumerate(_band_edges(feats.width, gw)):
            cell = np.zeros((feats.height, feats.width))
            cell[y0:y1, x0:x1] = 1.0
            flat = cell.reshape(-1)
            pool[i * gw + j] = flat / flat.sum()
    return Centers(ad.matmul(Tensor(pool), feats.features), iteration=0)


def soft_assign(feats: PixelFeatures, centers: Centers, temp: float = 1.0) -> Association:
    """Soft association of every pixel to every center at a given temperature."""
    if temp <= 0:
        raise ValueError(f"temp must be positive, got {temp}")
    d = ad.pairwise_sqdist(feats.features, centers.S)
    logits = ad.scale(d, -1.0 / temp)
    q = ad.exp(logits)
    # log of the per-pixel softmax; the row max is a constant shift
    rowmax = Tensor(logits.data.max(axis=1))
    shifted = ad.exp(ad.add_colvec(logits, ad.scale(rowmax, -1.0)))
    lse = ad.add(rowmax, ad.log(ad.sum_cols(shifted)))
    log_r = ad.add_colvec(logits, ad.scale(lse, -1.0))
    qhat = ad.transpose(ad.softmax_rows(ad.transpose(log_r)))
    n, m = d.data.shape
    return Association(Q=q, Qhat=qhat, n=n, m=m, logits=logits)


def update_centers(assoc: Association, feats: PixelFeatures) -> Centers:
    """New centers as association-weighted means: S = Qhat^T I."""
    if assoc.n != feats.n:
        raise ShapeError(f"association over {assoc.n} pixels, features over {feats.n}")
    return Centers(ad.matmul(ad.transpose(assoc.Qhat), feats.features))


def iterate(
    feats: PixelFeatures, m: int, iters: int = 5, temp: float = 1.0
) -> tuple[Association, Centers]:
    """Alternate soft assignment and center updates from the grid init.

    Returns the association computed in the last round together with the
    centers updated from it.
    """
    if iters < 1:
        raise ValueError(f"need at least one iteration, got {iters}")
    centers = init_centers(feats, m)
    assoc = None
    for t in range(iters):
        assoc = soft_assign(feats, centers, temp)
        centers = update_centers(assoc, feats)
        centers.iteration = t + 1
    return assoc, centers


def hard_assign(feats: PixelFeatures, centers: Centers) -> HardAssignment:
    """Nearest center per pixel (squared euclidean, lowest index on ties)."""
    diff = feats.features.data[:, None, :] - centers.S.data[None, :, :]
    d = np.einsum("nmk,nmk->nm", diff, diff)
    return HardAssignment(np.argmin(d, axis=1))


def association_from_q(q: Tensor) -> Association:
    """Build an Association from an explicit Q matrix (tests, hand cases)."""
    colsum = ad.sum_rows(q)
    if np.any(colsum.data <= 0):
        raise ValueError("every column of Q must have positive mass")
    qhat = ad.mul_rowvec(q, ad.powf(colsum, -1.0))
    n, m = q.data.shape
    return Association(Q=q, Qhat=qhat, n=n, m=m, logits=None)


def superpixelate(assoc: Association, x: Tensor) -> Tensor:
    """Round-trip features through superpixel space: X_sp = R (Qhat^T X).

    Qhat^T X pools pixel features into per-superpixel descriptors; R, each
    pixel's mixture over superpixels (rows summing to 1), maps them back.
    """
    if x.data.ndim != 2 or x.data.shape[0] != assoc.n:
        raise ShapeError(f"features {x.data.shape} do not cover {assoc.n} pixels")
    pooled = ad.matmul(ad.transpose(assoc.Qhat), x)
    if assoc.logits is not None:
        r = ad.softmax_rows(assoc.logits)
    else:
        r = ad.mul_colvec(assoc.Q, ad.powf(ad.sum_cols(assoc.Q), -1.0))
    return ad.matmul(r, pooled)
