"""Dense float64 tensors with taped reverse-mode differentiation.

The operation set is deliberately small and fixed: exactly the kernels the
segmentation pipeline needs, each with a hand-written backward rule.
Operations executed while a Tape is active record their rules on it;
``Tape.backward`` replays them in exact reverse order of recording.
Everything is 64-bit; reductions run in numpy's deterministic index order,
so repeated runs on one machine are bit-identical.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class EvaluationError(ArithmeticError):
    """A computation produced non-finite values where finite ones were required."""


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_active_tape: "Tape | None" = None
_debug = bool(int(os.environ.get("PROMPTPIX_DEBUG", "0") or "0"))

# Ops with a backward rule, in the order they appear below. Tests iterate
# this tuple to gradient-check each one.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "powf",
    "sigmoid",
    "softplus",
    "gelu",
    "matmul",
    "transpose",
    "sum_all",
    "mean_all",
    "sum_rows",
    "sum_cols",
    "add_rowvec",
    "add_colvec",
    "mul_rowvec",
    "mul_colvec",
    "softmax_rows",
    "pairwise_sqdist",
    "extract_patches",
    "avg_pool_grid",
    "upsample_bilinear",
    "concat_cols",
    "linear",
    "layer_norm",
)


def set_debug(flag: bool) -> None:
    """Toggle post-op finiteness checks (slow; meant for tests)."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """A dense float64 array, optionally carrying a same-shape grad buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def set_requires_grad(self, flag: bool) -> None:
        flag = bool(flag)
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif not flag:
            self.grad = None
        self.requires_grad = flag

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside append their backward
    rules, and ``backward`` replays them last-to-first. Tapes do not nest
    and are single-threaded.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> bool:
        global _active_tape
        _active_tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, rule: Callable[[], None]) -> None:
        self._records.append(rule)

    def backward(self, out: Tensor) -> None:
        """Seed d(out)/d(out)=1 and replay all rules in reverse order."""
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.data.shape}")
        if not out.requires_grad:
            raise ValueError("output does not require grad; nothing to differentiate")
        out.grad[...] = 1.0
        for rule in reversed(self._records):
            rule()

    def clear(self) -> None:
        self._records.clear()


def _make(data: np.ndarray, name: str, *parents: Tensor) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise EvaluationError(f"{name} produced non-finite values")
    track = _active_tape is not None and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track)


def _record(rule: Callable[[], None]) -> None:
    _active_tape.record(rule)


def _need_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)
    out = _make(a.data + b.data, "add", a, b)
    if out.requires_grad:
        def rule():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        _record(rule)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("sub", a, b)
    out = _make(a.data - b.data, "sub", a, b)
    if out.requires_grad:
        def rule():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad -= out.grad
        _record(rule)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("mul", a, b)
    out = _make(a.data * b.data, "mul", a, b)
    if out.requires_grad:
        def rule():
            if a.requires_grad:
                a.grad += out.grad * b.data
            if b.requires_grad:
                b.grad += out.grad * a.data
        _record(rule)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * s, "scale", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad * s
        _record(rule)
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = _make(a.data + s, "add_scalar", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad
        _record(rule)
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), "exp", a)
    if out.requires_grad:
        y = out.data
        def rule():
            a.grad += out.grad * y
        _record(rule)
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), "log", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad / a.data
        _record(rule)
    return out


def powf(a: Tensor, p: float) -> Tensor:
    out = _make(a.data ** p, "powf", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad * p * a.data ** (p - 1.0)
        _record(rule)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _make(_sigmoid(a.data), "sigmoid", a)
    if out.requires_grad:
        y = out.data
        def rule():
            a.grad += out.grad * y * (1.0 - y)
        _record(rule)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    x = a.data
    out = _make(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), "softplus", a)
    if out.requires_grad:
        s = _sigmoid(x)
        def rule():
            a.grad += out.grad * s
        _record(rule)
    return out


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF (erf form, not tanh)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make(x * cdf, "gelu", a)
    if out.requires_grad:
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        local = cdf + x * pdf
        def rule():
            a.grad += out.grad * local
        _record(rule)
    return out


# ---------------------------------------------------------------------------
# matrix / reduction
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
    out = _make(a.data @ b.data, "matmul", a, b)
    if out.requires_grad:
        def rule():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g
        _record(rule)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    out = _make(np.ascontiguousarray(a.data.T), "transpose", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad.T
        _record(rule)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.sum(a.data), "sum_all", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad
        _record(rule)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.sum(a.data) / n, "mean_all", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad / n
        _record(rule)
    return out


def sum_rows(a: Tensor) -> Tensor:
    """Sum over axis 0 of a (p, q) matrix -> (q,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got shape {a.data.shape}")
    out = _make(a.data.sum(axis=0), "sum_rows", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad
        _record(rule)
    return out


def sum_cols(a: Tensor) -> Tensor:
    """Sum over axis 1 of a (p, q) matrix -> (p,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols: expected a matrix, got shape {a.data.shape}")
    out = _make(a.data.sum(axis=1), "sum_cols", a)
    if out.requires_grad:
        def rule():
            a.grad += out.grad[:, None]
        _record(rule)
    return out


# ---------------------------------------------------------------------------
# broadcast of a vector over a matrix
# ---------------------------------------------------------------------------

def _need_vec(name: str, x: Tensor, v: Tensor, axis_len: int) -> None:
    if x.data.ndim != 2 or v.data.ndim != 1 or v.data.shape[0] != axis_len:
        raise ShapeError(f"{name}: matrix {x.data.shape} with vector {v.data.shape}")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[i, j] + v[j] (bias-style broadcast down the rows)."""
    _need_vec("add_rowvec", x, v, x.data.shape[1] if x.data.ndim == 2 else -1)
    out = _make(x.data + v.data, "add_rowvec", x, v)
    if out.requires_grad:
        def rule():
            if x.requires_grad:
                x.grad += out.grad
            if v.requires_grad:
                v.grad += out.grad.sum(axis=0)
        _record(rule)
    return out


def add_colvec(x: Tensor, v: Tensor) -> Tensor:
    """x[i, j] + v[i]."""
    _need_vec("add_colvec", x, v, x.data.shape[0] if x.data.ndim == 2 else -1)
    out = _make(x.data + v.data[:, None], "add_colvec", x, v)
    if out.requires_grad:
        def rule():
            if x.requires_grad:
                x.grad += out.grad
            if v.requires_grad:
                v.grad += out.grad.sum(axis=1)
        _record(rule)
    return out


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[i, j] * v[j]."""
    _need_vec("mul_rowvec", x, v, x.data.shape[1] if x.data.ndim == 2 else -1)
    out = _make(x.data * v.data, "mul_rowvec", x, v)
    if out.requires_grad:
        def rule():
            if x.requires_grad:
                x.grad += out.grad * v.data
            if v.requires_grad:
                v.grad += (out.grad * x.data).sum(axis=0)
        _record(rule)
    return out


def mul_colvec(x: Tensor, v: Tensor) -> Tensor:
    """x[i, j] * v[i]."""
    _need_vec("mul_colvec", x, v, x.data.shape[0] if x.data.ndim == 2 else -1)
    out = _make(x.data * v.data[:, None], "mul_colvec", x, v)
    if out.requires_grad:
        def rule():
            if x.requires_grad:
                x.grad += out.grad * v.data[:, None]
            if v.requires_grad:
                v.grad += (out.grad * x.data).sum(axis=1)
        _record(rule)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with row-max subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _make(s, "softmax_rows", x)
    if out.requires_grad:
        def rule():
            g = out.grad
            dot = (g * s).sum(axis=1, keepdims=True)
            x.grad += s * (g - dot)
        _record(rule)
    return out


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared euclidean distances between rows: out[p, i] = ||a_p - b_i||^2.

    Computed from explicit differences so the result is exactly
    non-negative (no cancellation).
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sqdist: {a.data.shape} vs {b.data.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]            # (n, m, k)
    out = _make(np.einsum("nmk,nmk->nm", diff, diff), "pairwise_sqdist", a, b)
    if out.requires_grad:
        def rule():
            w = 2.0 * diff * out.grad[:, :, None]
            if a.requires_grad:
                a.grad += w.sum(axis=1)
            if b.requires_grad:
                b.grad -= w.sum(axis=0)
        _record(rule)
    return out


# ---------------------------------------------------------------------------
# spatial ops on row-major (h*w, C) grids
# ---------------------------------------------------------------------------

_PATCH_INDEX_CACHE: dict[tuple, np.ndarray] = {}
_BILINEAR_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _patch_indices(h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    key = (h, w, k, stride, pad)
    idx = _PATCH_INDEX_CACHE.get(key)
    if idx is None:
        th = (h + 2 * pad - k) // stride + 1
        tw = (w + 2 * pad - k) // stride + 1
        rows = []
        for ty in range(th):
            for tx in range(tw):
                taps = []
                for dy in range(k):
                    for dx in range(k):
                        sy = ty * stride - pad + dy
                        sx = tx * stride - pad + dx
                        taps.append(sy * w + sx if 0 <= sy < h and 0 <= sx < w else -1)
                rows.append(taps)
        idx = np.asarray(rows, dtype=np.int64)
        _PATCH_INDEX_CACHE[key] = idx
    return idx


def extract_patches(x: Tensor, h: int, w: int, k: int, stride: int, pad: int) -> Tensor:
    """im2col on a row-major (h*w, C) grid -> (tokens, k*k*C); zero padding."""
    if x.data.ndim != 2 or x.data.shape[0] != h * w:
        raise ShapeError(f"extract_patches: expected ({h * w}, C), got {x.data.shape}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"extract_patches: {h}x{w} too small for k={k} pad={pad}")
    c = x.data.shape[1]
    idx = _patch_indices(h, w, k, stride, pad)                # (T, k*k)
    flat_idx = idx.reshape(-1)
    gathered = x.data[np.maximum(flat_idx, 0)]
    gathered[flat_idx < 0] = 0.0
    out = _make(gathered.reshape(idx.shape[0], k * k * c), "extract_patches", x)
    if out.requires_grad:
        valid = flat_idx >= 0
        tgt = flat_idx[valid]
        def rule():
            g = out.grad.reshape(-1, c)
            np.add.at(x.grad, tgt, g[valid])
        _record(rule)
    return out


def avg_pool_grid(x: Tensor, h: int, w: int, fh: int, fw: int) -> Tensor:
    """Non-overlapping (fh, fw) mean pooling of a row-major (h*w, C) grid."""
    if x.data.ndim != 2 or x.data.shape[0] != h * w:
        raise ShapeError(f"avg_pool_grid: expected ({h * w}, C), got {x.data.shape}")
    if h % fh or w % fw:
        raise ShapeError(f"avg_pool_grid: {h}x{w} not divisible by {fh}x{fw}")
    c = x.data.shape[1]
    th, tw = h // fh, w // fw
    view = x.data.reshape(th, fh, tw, fw, c)
    out = _make(view.mean(axis=(1, 3)).reshape(th * tw, c), "avg_pool_grid", x)
    if out.requires_grad:
        inv = 1.0 / (fh * fw)
        def rule():
            g = out.grad.reshape(th, 1, tw, 1, c) * inv
            x.grad += np.broadcast_to(g, (th, fh, tw, fw, c)).reshape(h * w, c)
        _record(rule)
    return out


def _bilinear_taps(gh: int, gw: int, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    # half-pixel-center convention (align_corners=False)
    key = (gh, gw, H, W)
    cached = _BILINEAR_CACHE.get(key)
    if cached is None:
        sy = np.clip((np.arange(H) + 0.5) * gh / H - 0.5, 0.0, gh - 1.0)
        sx = np.clip((np.arange(W) + 0.5) * gw / W - 0.5, 0.0, gw - 1.0)
        y0 = np.floor(sy).astype(np.int64)
        x0 = np.floor(sx).astype(np.int64)
        y1 = np.minimum(y0 + 1, gh - 1)
        x1 = np.minimum(x0 + 1, gw - 1)
        wy = sy - y0
        wx = sx - x0
        Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
        Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
        WY, WX = np.meshgrid(wy, wx, indexing="ij")
        idx = np.stack(
            [Y0 * gw + X0, Y0 * gw + X1, Y1 * gw + X0, Y1 * gw + X1], axis=-1
        ).reshape(H * W, 4)
        wts = np.stack(
            [(1 - WY) * (1 - WX), (1 - WY) * WX, WY * (1 - WX), WY * WX], axis=-1
        ).reshape(H * W, 4)
        cached = (idx, wts)
        _BILINEAR_CACHE[key] = cached
    return cached


def upsample_bilinear(x: Tensor, gh: int, gw: int, H: int, W: int) -> Tensor:
    """Bilinear resize of a row-major (gh*gw, C) grid to (H*W, C)."""
    if x.data.ndim != 2 or x.data.shape[0] != gh * gw:
        raise ShapeError(f"upsample_bilinear: expected ({gh * gw}, C), got {x.data.shape}")
    idx, wts = _bilinear_taps(gh, gw, H, W)
    data = np.zeros((H * W, x.data.shape[1]))
    for j in range(4):
        data += wts[:, j, None] * x.data[idx[:, j]]
    out = _make(data, "upsample_bilinear", x)
    if out.requires_grad:
        def rule():
            for j in range(4):
                np.add.at(x.grad, idx[:, j], out.grad * wts[:, j, None])
        _record(rule)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ ({[q.data.shape for q in parts]})")
    out = _make(np.concatenate([p.data for p in parts], axis=1), "concat_cols", *parts)
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
        def rule():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.grad += out.grad[:, lo:hi]
        _record(rule)
    return out


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} x {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match width {w.data.shape[1]}")
    return add_rowvec(matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    q = x.data.shape[1]
    mu = scale(sum_cols(x), 1.0 / q)
    centered = add_colvec(x, scale(mu, -1.0))
    var = scale(sum_cols(mul(centered, centered)), 1.0 / q)
    inv = powf(add_scalar(var, eps), -0.5)
    normed = mul_colvec(centered, inv)
    return add_rowvec(mul_rowvec(normed, gain), bias)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f`` must map a Tensor to a scalar Tensor. ``indices`` restricts the
    numeric probe to a subset of flat coordinates (the analytic gradient is
    always full). Relative error is |a - n| / max(|a|, |n|, 1e-4); the floor
    keeps roundoff noise on near-zero coordinates from dominating.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {out.data.shape}")
        if not np.all(np.isfinite(out.data)):
            raise EvaluationError("grad_check: f(x) is not finite")
        tape.backward(out)
    analytic = probe.grad.reshape(-1)

    base = x.data.reshape(-1)
    if indices is None:
        indices = range(base.size)
    worst = 0.0
    for i in indices:
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(x.data.shape))).data
        fm = f(Tensor(minus.reshape(x.data.shape))).data
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise EvaluationError(f"grad_check: f not finite at perturbed coordinate {i}")
        numeric = (float(fp) - float(fm)) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
        worst = max(worst, rel)
    return worst
