"""Prompt generation: all trainable signal paths of the model.

Three ingredients per tuned stage: a tunable linear projection of the
frozen patch-embedding tokens down to a narrow prompt width c = C/gamma; a
projection of superpixel-pooled features onto the same width; and per-block
adapters (narrow linear -> GELU -> shared up-projection) plus a learned
single-head attention over raw image patches. The adapter output and the
attention output are summed into the per-block prompt that the backbone
adds to its token stream.

Up-projections and attention output maps start at zero, so an untrained
prompt is exactly a no-op on the frozen forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ConfigError


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Small uniform +-1/sqrt(fan_in); fan_in is the first axis."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class IEGPParams:
    """Tunable projection of the frozen patch embedding to width c = C/gamma."""

    weight: Tensor  # (C_seg, c)
    bias: Tensor    # (c,)
    gamma: int
    c_seg: int

    def __post_init__(self):
        if self.c_seg % self.gamma:
            raise ConfigError(f"gamma {self.gamma} does not divide embedding width {self.c_seg}")
        c = self.c_seg // self.gamma
        if self.weight.shape != (self.c_seg, c) or self.bias.shape != (c,):
            raise ShapeError(
                f"projection weights {self.weight.shape}/{self.bias.shape} "
                f"do not match ({self.c_seg}, {c})"
            )

    @property
    def c(self) -> int:
        return self.c_seg // self.gamma


@dataclass
class AdapterParams:
    """Per-block adapters plus the optional attention-prompt projections.

    ``tune_w``/``tune_b`` hold one entry per block, or a single shared
    entry; ``up_w``/``up_b`` hold the single shared up-projection or one
    per block. Attention tensors are None when the variant disables the
    attention prompt.
    """

    tune_w: list
    tune_b: list
    up_w: list
    up_b: list
    share_tune: bool
    share_up: bool
    n_blocks: int
    wq: Tensor | None = None
    wk: Tensor | None = None
    wv: Tensor | None = None
    wo: Tensor | None = None
    bo: Tensor | None = None

    def tune_for(self, block: int) -> tuple[Tensor, Tensor]:
        if not 0 <= block < self.n_blocks:
            raise IndexError(f"block {block} out of range 0..{self.n_blocks - 1}")
        j = 0 if self.share_tune else block
        return self.tune_w[j], self.tune_b[j]

    def up_for(self, block: int) -> tuple[Tensor, Tensor]:
        if not 0 <= block < self.n_blocks:
            raise IndexError(f"block {block} out of range 0..{self.n_blocks - 1}")
        j = 0 if self.share_up else block
        return self.up_w[j], self.up_b[j]


@dataclass
class PromptBundle:
    """Per-block prompts of one stage: p_k[b] = p_i[b] + p_j."""

    p_i: list        # per block (tokens, C_seg)
    p_j: Tensor | None
    p_k: list        # per block (tokens, C_seg)


def iegp_project(frozen_embed: Tensor, params: IEGPParams) -> Tensor:
    """Project frozen patch-embedding tokens to the prompt width."""
    if frozen_embed.data.ndim != 2 or frozen_embed.data.shape[1] != params.c_seg:
        raise ShapeError(
            f"embedding tokens {frozen_embed.shape} do not have width {params.c_seg}"
        )
    return ad.linear(frozen_embed, params.weight, params.bias)


def project_xsp(
    x_sp_raw: Tensor,
    height: int,
    width: int,
    grid_h: int,
    grid_w: int,
    weight: Tensor,
    bias: Tensor,
) -> Tensor:
    """Average-pool full-resolution superpixelated features onto a stage's
    token grid, then project them to the prompt width."""
    if x_sp_raw.data.shape[0] != height * width:
        raise ShapeError(f"features {x_sp_raw.shape} do not cover {height}x{width} pixels")
    if height % grid_h or width % grid_w:
        raise ShapeError(f"{height}x{width} does not pool onto a {grid_h}x{grid_w} grid")
    pooled = ad.avg_pool_grid(x_sp_raw, height, width, height // grid_h, width // grid_w)
    return ad.linear(pooled, weight, bias)


def adapter_prompt(
    x_pe: Tensor, x_sp: Tensor | None, block: int, params: AdapterParams
) -> Tensor:
    """Adapter for one block: up(GELU(tune(x_pe + x_sp)))."""
    z = ad.add(x_pe, x_sp) if x_sp is not None else x_pe
    tune_w, tune_b = params.tune_for(block)
    up_w, up_b = params.up_for(block)
    return ad.linear(ad.gelu(ad.linear(z, tune_w, tune_b)), up_w, up_b)


def attention_prompt(input_tokens: Tensor, params: AdapterParams) -> Tensor:
    """Single-head scaled dot-product self-attention over raw image tokens,
    mapped up to the stage width."""
    if params.wq is None:
        raise ValueError("this adapter has no attention-prompt parameters")
    q = ad.matmul(input_tokens, params.wq)
    k = ad.matmul(input_tokens, params.wk)
    v = ad.matmul(input_tokens, params.wv)
    d_h = params.wq.data.shape[1]
    weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_h)))
    return ad.add_rowvec(ad.matmul(ad.matmul(weights, v), params.wo), params.bo)


def combine(p_i: Tensor, p_j: Tensor) -> Tensor:
    """Elementwise sum of the adapter and attention prompts."""
    return ad.add(p_i, p_j)
