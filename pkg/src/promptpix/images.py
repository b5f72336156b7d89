"""Image and mask I/O plus the XYLab pixel-feature matrix.

Reads 8-bit PNG (via Pillow) and binary PGM (P5); writes PNG overlays and
16-bit PGM label maps. Color conversion is sRGB -> CIE Lab under the D65
white point. Pixel features are the five columns (X, Y, L, a, b) with
positions normalized to [0, pos_scale] and Lab divided by 100 so every
dimension is O(1).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import Tensor


class UnsupportedFormatError(ValueError):
    """File is not one of the supported image formats."""


class CorruptImageError(ValueError):
    """File claims a supported format but cannot be decoded."""


@dataclass
class ImageRGB:
    height: int
    width: int
    data: np.ndarray  # (h, w, 3) uint8

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width, 3):
            raise ValueError(f"image data shape {self.data.shape} != ({self.height}, {self.width}, 3)")


@dataclass
class BinaryMask:
    height: int
    width: int
    data: np.ndarray  # (h, w) uint8 in {0, 1}

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width):
            raise ValueError(f"mask data shape {self.data.shape} != ({self.height}, {self.width})")
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")


@dataclass
class PixelFeatures:
    """Row-major (n, 5) matrix of scaled (X, Y, L, a, b) per-pixel features."""

    features: Tensor
    pos_scale: float
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.height * self.width


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def load_image(path) -> ImageRGB:
    """Decode a PNG or PGM file; grayscale is replicated to 3 channels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_PNG_MAGIC):
        try:
            with Image.open(io.BytesIO(raw)) as im:
                im.load()
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, UnidentifiedImageError, SyntaxError) as exc:
            raise CorruptImageError(f"{path}: corrupt PNG stream ({exc})") from exc
        return ImageRGB(arr.shape[0], arr.shape[1], arr)
    if raw.startswith(b"P5"):
        gray, w, h = _parse_pgm(raw, path)
        if gray.dtype != np.uint8:  # 16-bit labels are not images
            raise UnsupportedFormatError(f"{path}: 16-bit PGM is not supported as an image")
        rgb = np.repeat(gray.reshape(h, w, 1), 3, axis=2)
        return ImageRGB(h, w, rgb)
    raise UnsupportedFormatError(f"{path}: not a PNG or P5 PGM file")


def _parse_pgm(raw: bytes, path) -> tuple[np.ndarray, int, int]:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImageError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise CorruptImageError(f"{path}: bad PGM header") from exc
    if w <= 0 or h <= 0 or not (0 < maxval < 65536):
        raise CorruptImageError(f"{path}: bad PGM dimensions {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    body = raw[pos : pos + need]
    if len(body) < need:
        raise CorruptImageError(f"{path}: PGM body truncated ({len(body)} of {need} bytes)")
    pixels = np.frombuffer(body, dtype=dtype).reshape(h, w)
    if dtype != np.uint8:
        return pixels.astype(np.uint16), w, h
    return pixels.copy(), w, h


def load_mask(path) -> BinaryMask:
    """Load an 8-bit mask image and binarize it at threshold 128."""
    img = load_image(path)
    return BinaryMask(img.height, img.width, (img.data[:, :, 0] >= 128).astype(np.uint8))


def save_png(array: np.ndarray, path) -> None:
    """Write an (h, w, 3) or (h, w) uint8 array as PNG."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_pgm16(labels: np.ndarray, path) -> None:
    """Write an (h, w) integer label map as 16-bit P5 PGM (big-endian body)."""
    lab = np.ascontiguousarray(labels, dtype=np.uint16)
    h, w = lab.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(lab.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# color conversion
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA3 = (6.0 / 29.0) ** 3


def rgb_to_lab(img: ImageRGB) -> np.ndarray:
    """sRGB bytes -> (n, 3) CIE Lab rows under D65, row-major over pixels."""
    srgb = img.data.reshape(-1, 3).astype(np.float64) / 255.0
    lin = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _D65_WHITE
    f = np.where(xyz > _LAB_DELTA3, np.cbrt(xyz), xyz / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[:, 0] = 116.0 * f[:, 1] - 16.0
    lab[:, 1] = 500.0 * (f[:, 0] - f[:, 1])
    lab[:, 2] = 200.0 * (f[:, 1] - f[:, 2])
    return lab


def build_xylab(img: ImageRGB, pos_scale: float = 1.0) -> PixelFeatures:
    """Assemble the (n, 5) scaled XYLab feature matrix for one image."""
    if pos_scale <= 0:
        raise ValueError(f"pos_scale must be positive, got {pos_scale}")
    h, w = img.height, img.width
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    x = pos_scale * (cols / (w - 1) if w > 1 else np.zeros_like(cols))
    y = pos_scale * (rows / (h - 1) if h > 1 else np.zeros_like(rows))
    lab = rgb_to_lab(img) / 100.0
    feats = np.column_stack([x, y, lab])
    return PixelFeatures(Tensor(feats), pos_scale, h, w)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

_BOUNDARY_COLOR = np.array([255, 0, 0], dtype=np.uint8)


def mask_boundary(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels adjacent to background or to the image border."""
    m = mask.data.astype(bool)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = (
        m[1:-1, 1:-1]
        & m[:-2, 1:-1]
        & m[2:, 1:-1]
        & m[1:-1, :-2]
        & m[1:-1, 2:]
    )
    return m & ~inner


def label_boundary(labels: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from the right or down neighbor."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    return edge


def save_overlay(img: ImageRGB, mask_or_labels, path) -> None:
    """Write the image with boundaries painted in a fixed color."""
    if isinstance(mask_or_labels, BinaryMask):
        if (mask_or_labels.height, mask_or_labels.width) != (img.height, img.width):
            raise ValueError("mask dimensions do not match image")
        edge = mask_boundary(mask_or_labels)
    else:
        lab = np.asarray(mask_or_labels)
        if lab.ndim == 1:
            lab = lab.reshape(img.height, img.width)
        if lab.shape != (img.height, img.width):
            raise ValueError("label dimensions do not match image")
        edge = label_boundary(lab)
    out = img.data.copy()
    out[edge] = _BOUNDARY_COLOR
    save_png(out, path)
