"""Synthetic blob corpus and on-disk dataset layout.

Each synthetic sample is 1-3 random ellipses of a brighter intensity on a
darker background with Gaussian texture noise; the mask is the exact
ellipse support. Generation rejects draws until the foreground fraction
lands in [0.05, 0.6] and the measured foreground/background mean-intensity
gap is at least 0.2, so those properties hold per sample by construction.

On disk a dataset is ``<root>/images/*.png`` and ``<root>/masks/*.png``
matched by filename stem.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import BinaryMask, ImageRGB, load_image, load_mask, save_png

FG_FRACTION_RANGE = (0.05, 0.6)
MIN_INTENSITY_GAP = 0.2


@dataclass
class Sample:
    image: ImageRGB
    mask: BinaryMask
    name: str


def _ellipse_support(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    a = rng.uniform(0.10, 0.32) * min(h, w)
    b = rng.uniform(0.10, 0.32) * min(h, w)
    theta = rng.uniform(0.0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _synth_sample(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(200):
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            mask |= _ellipse_support(h, w, rng)
        frac = mask.mean()
        if not (FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]):
            continue
        base = rng.uniform(0.15, 0.45)
        gap = rng.uniform(0.3, 0.45)
        img = base + mask * gap + rng.normal(0.0, 0.05, (h, w))
        img = np.clip(img, 0.0, 1.0)
        if img[mask].mean() - img[~mask].mean() < MIN_INTENSITY_GAP:
            continue
        return img, mask
    raise RuntimeError(f"could not draw a valid {h}x{w} sample in 200 attempts")


def synth_dataset(n: int, height: int, width: int, seed: int) -> list[Sample]:
    """Deterministic corpus of n (image, mask) pairs for one seed."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, mask = _synth_sample(height, width, rng)
        gray = np.round(img * 255.0).astype(np.uint8)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
        samples.append(
            Sample(
                image=ImageRGB(height, width, rgb),
                mask=BinaryMask(height, width, mask.astype(np.uint8)),
                name=f"sample_{i:04d}",
            )
        )
    return samples


def write_dataset(samples: list, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_png(s.image.data, root / "images" / f"{s.name}.png")
        save_png(s.mask.data * 255, root / "masks" / f"{s.name}.png")


def load_dataset(root) -> list[Sample]:
    """Load image/mask pairs matched by filename stem."""
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise FileNotFoundError(f"{mask_path}: no mask for image {img_path.name}")
        img = load_image(img_path)
        mask = load_mask(mask_path)
        if (mask.height, mask.width) != (img.height, img.width):
            raise ValueError(f"{img_path.stem}: image and mask dimensions differ")
        samples.append(Sample(image=img, mask=mask, name=img_path.stem))
    if not samples:
        raise FileNotFoundError(f"{img_dir}: no PNG images found")
    return samples
