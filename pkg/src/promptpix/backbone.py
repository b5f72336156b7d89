"""Frozen toy hierarchical transformer with prompt injection.

Four stages of overlapped patch embedding (kernel 2s-1, stride s, padding
s-1) followed by pre-norm transformer blocks, and an all-token MLP decoder
that fuses the four stage outputs at quarter resolution into one logit per
pixel. Backbone weights are randomly initialized once from the seed and
stay frozen; only the decoder and the prompt parameters train.

In tuned stages, the per-block prompt is added to the block's input
tokens. Prompt inputs (per-stage embedding tokens, superpixelated stage-1
features, patchified raw image) are taken from the unprompted frozen pass,
so the prompts for an image are a pure function of the image and the
prompt parameters and can be cached across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import prompting as pr
from . import superpixel as sp
from .autodiff import ShapeError, Tensor
from .config import BackboneConfig, ConfigError, VariantFlags, variant_flags
from .images import ImageRGB, build_xylab
from .prompting import AdapterParams, IEGPParams, PromptBundle, uniform_init


class ModelParams:
    """Flat tree of named tensors, each tagged frozen or tunable."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray, tunable: bool) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=tunable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_tunable(self, name: str) -> bool:
        return self._tensors[name].requires_grad

    def tunable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if not t.requires_grad]

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class StageParams:
    embed_w: Tensor
    embed_b: Tensor
    embed_ln_g: Tensor
    embed_ln_b: Tensor
    blocks: list
    out_ln_g: Tensor
    out_ln_b: Tensor


@dataclass
class DecoderParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class StagePromptParams:
    iegp: IEGPParams
    xsp_w: Tensor | None
    xsp_b: Tensor | None
    adapter: AdapterParams


class Model:
    """Parameter tree plus structured views over it."""

    def __init__(self, cfg: BackboneConfig, variant: str, params: ModelParams,
                 stages: list, decoder: DecoderParams, prompts: dict):
        self.cfg = cfg
        self.variant = variant
        self.flags: VariantFlags = variant_flags(variant)
        self.params = params
        self.stages = stages
        self.decoder = decoder
        self.prompts = prompts  # stage number (1-based) -> StagePromptParams


def build_model(cfg: BackboneConfig, variant: str = "full") -> Model:
    """Deterministically initialize all parameters from cfg.seed."""
    flags = variant_flags(variant)
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams()

    stages = []
    prev_ch = 3
    for s in range(1, 5):
        width = cfg.stage_widths[s - 1]
        stride = cfg.patch_strides[s - 1]
        head = cfg.head_dims[s - 1]
        hidden = int(round(width * cfg.mlp_ratio))
        k = 2 * stride - 1
        pre = f"stage{s}"
        embed_in = prev_ch * k * k
        embed_w = params.add(f"{pre}.embed.weight", uniform_init(rng, (embed_in, width)), False)
        embed_b = params.add(f"{pre}.embed.bias", np.zeros(width), False)
        embed_ln_g = params.add(f"{pre}.embed.norm.gain", np.ones(width), False)
        embed_ln_b = params.add(f"{pre}.embed.norm.bias", np.zeros(width), False)
        blocks = []
        for b in range(cfg.stage_depths[s - 1]):
            bp = f"{pre}.block{b}"
            blocks.append(BlockParams(
                ln1_g=params.add(f"{bp}.norm1.gain", np.ones(width), False),
                ln1_b=params.add(f"{bp}.norm1.bias", np.zeros(width), False),
                wq=params.add(f"{bp}.attn.wq", uniform_init(rng, (width, head)), False),
                wk=params.add(f"{bp}.attn.wk", uniform_init(rng, (width, head)), False),
                wv=params.add(f"{bp}.attn.wv", uniform_init(rng, (width, head)), False),
                wo=params.add(f"{bp}.attn.wo", uniform_init(rng, (head, width)), False),
                bo=params.add(f"{bp}.attn.bo", np.zeros(width), False),
                ln2_g=params.add(f"{bp}.norm2.gain", np.ones(width), False),
                ln2_b=params.add(f"{bp}.norm2.bias", np.zeros(width), False),
                w1=params.add(f"{bp}.mlp.w1", uniform_init(rng, (width, hidden)), False),
                b1=params.add(f"{bp}.mlp.b1", np.zeros(hidden), False),
                w2=params.add(f"{bp}.mlp.w2", uniform_init(rng, (hidden, width)), False),
                b2=params.add(f"{bp}.mlp.b2", np.zeros(width), False),
            ))
        out_ln_g = params.add(f"{pre}.norm.gain", np.ones(width), False)
        out_ln_b = params.add(f"{pre}.norm.bias", np.zeros(width), False)
        stages.append(StageParams(embed_w, embed_b, embed_ln_g, embed_ln_b,
                                  blocks, out_ln_g, out_ln_b))
        prev_ch = width

    fused = sum(cfg.stage_widths)
    decoder = DecoderParams(
        fc1_w=params.add("decoder.fc1.weight", uniform_init(rng, (fused, cfg.decoder_hidden)), True),
        fc1_b=params.add("decoder.fc1.bias", np.zeros(cfg.decoder_hidden), True),
        fc2_w=params.add("decoder.fc2.weight", uniform_init(rng, (cfg.decoder_hidden, 1)), True),
        fc2_b=params.add("decoder.fc2.bias", np.zeros(1), True),
    )

    prompts = {}
    if flags.use_prompts:
        cum = cfg.cumulative_strides
        for s in sorted(cfg.tuned_stages):
            width = cfg.stage_widths[s - 1]
            if width % cfg.gamma:
                raise ConfigError(f"gamma {cfg.gamma} does not divide stage width {width}")
            c = width // cfg.gamma
            depth = cfg.stage_depths[s - 1]
            pre = f"prompt.stage{s}"
            iegp = IEGPParams(
                weight=params.add(f"{pre}.iegp.weight", uniform_init(rng, (width, c)), True),
                bias=params.add(f"{pre}.iegp.bias", np.zeros(c), True),
                gamma=cfg.gamma,
                c_seg=width,
            )
            xsp_w = xsp_b = None
            if flags.use_superpixels:
                d = cfg.stage_widths[0]
                xsp_w = params.add(f"{pre}.xsp.weight", uniform_init(rng, (d, c)), True)
                xsp_b = params.add(f"{pre}.xsp.bias", np.zeros(c), True)
            n_tune = 1 if flags.share_tune else depth
            tune_w = [params.add(f"{pre}.adapter.tune{j}.weight", uniform_init(rng, (c, c)), True)
                      for j in range(n_tune)]
            tune_b = [params.add(f"{pre}.adapter.tune{j}.bias", np.zeros(c), True)
                      for j in range(n_tune)]
            n_up = 1 if flags.share_up else depth
            up_w = [params.add(f"{pre}.adapter.up{j}.weight", np.zeros((c, width)), True)
                    for j in range(n_up)]
            up_b = [params.add(f"{pre}.adapter.up{j}.bias", np.zeros(width), True)
                    for j in range(n_up)]
            wq = wk = wv = wo = bo = None
            if flags.use_attention:
                token_dim = cum[s - 1] * cum[s - 1] * 3
                d_h = cfg.prompt_attn_dim
                wq = params.add(f"{pre}.attn.wq", uniform_init(rng, (token_dim, d_h)), True)
                wk = params.add(f"{pre}.attn.wk", uniform_init(rng, (token_dim, d_h)), True)
                wv = params.add(f"{pre}.attn.wv", uniform_init(rng, (token_dim, d_h)), True)
                wo = params.add(f"{pre}.attn.wo", np.zeros((d_h, width)), True)
                bo = params.add(f"{pre}.attn.bo", np.zeros(width), True)
            adapter = AdapterParams(
                tune_w=tune_w, tune_b=tune_b, up_w=up_w, up_b=up_b,
                share_tune=flags.share_tune, share_up=flags.share_up,
                n_blocks=depth, wq=wq, wk=wk, wv=wv, wo=wo, bo=bo,
            )
            prompts[s] = StagePromptParams(iegp, xsp_w, xsp_b, adapter)

    return Model(cfg, variant, params, stages, decoder, prompts)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _image_tensor(img: ImageRGB) -> Tensor:
    return Tensor(img.data.reshape(-1, 3).astype(np.float64) / 255.0)


def _block_forward(tokens: Tensor, blk: BlockParams) -> Tensor:
    a = ad.layer_norm(tokens, blk.ln1_g, blk.ln1_b)
    q = ad.matmul(a, blk.wq)
    k = ad.matmul(a, blk.wk)
    v = ad.matmul(a, blk.wv)
    d_h = blk.wq.data.shape[1]
    weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_h)))
    attn = ad.add_rowvec(ad.matmul(ad.matmul(weights, v), blk.wo), blk.bo)
    tokens = ad.add(tokens, attn)
    f = ad.layer_norm(tokens, blk.ln2_g, blk.ln2_b)
    mlp = ad.linear(ad.gelu(ad.linear(f, blk.w1, blk.b1)), blk.w2, blk.b2)
    return ad.add(tokens, mlp)


def encode(model: Model, img: ImageRGB, prompts: dict | None = None):
    """Run the four stages; returns [(tokens, grid_h, grid_w)] per stage.

    ``prompts`` maps stage number to a PromptBundle whose p_k entries are
    added to the block input tokens of that stage.
    """
    cfg = model.cfg
    cfg.check_image_size(img.height, img.width)
    cur = _image_tensor(img)
    ch, cw = img.height, img.width
    outs = []
    for si, stage in enumerate(model.stages):
        stride = cfg.patch_strides[si]
        k = 2 * stride - 1
        patches = ad.extract_patches(cur, ch, cw, k, stride, stride - 1)
        tokens = ad.layer_norm(
            ad.linear(patches, stage.embed_w, stage.embed_b),
            stage.embed_ln_g, stage.embed_ln_b,
        )
        ch, cw = ch // stride, cw // stride
        bundle = prompts.get(si + 1) if prompts else None
        for bi, blk in enumerate(stage.blocks):
            if bundle is not None:
                p_k = bundle.p_k[bi]
                if p_k.data.shape != tokens.data.shape:
                    raise ShapeError(
                        f"stage {si + 1} block {bi}: prompt {p_k.data.shape} "
                        f"vs tokens {tokens.data.shape}"
                    )
                tokens = ad.add(tokens, p_k)
            tokens = _block_forward(tokens, blk)
        tokens = ad.layer_norm(tokens, stage.out_ln_g, stage.out_ln_b)
        outs.append((tokens, ch, cw))
        cur = tokens
    return outs


def decode(model: Model, stage_outs, height: int, width: int) -> Tensor:
    """Fuse stage outputs at the stage-1 grid and emit per-pixel logits."""
    _, gh1, gw1 = stage_outs[0]
    feats = []
    for tokens, gh, gw in stage_outs:
        if (gh, gw) == (gh1, gw1):
            feats.append(tokens)
        else:
            feats.append(ad.upsample_bilinear(tokens, gh, gw, gh1, gw1))
    dec = model.decoder
    hidden = ad.gelu(ad.linear(ad.concat_cols(feats), dec.fc1_w, dec.fc1_b))
    tok_logits = ad.linear(hidden, dec.fc2_w, dec.fc2_b)
    return ad.upsample_bilinear(tok_logits, gh1, gw1, height, width)


def forward(model: Model, img: ImageRGB, prompts: dict | None = None) -> Tensor:
    """Full prompted pass: (h*w, 1) logits at input resolution."""
    return decode(model, encode(model, img, prompts), img.height, img.width)


# ---------------------------------------------------------------------------
# frozen per-image features feeding the prompts
# ---------------------------------------------------------------------------

@dataclass
class FrozenFeatures:
    """Constants per image: everything the prompt paths consume."""

    embed_tokens: list      # per stage, post-embed tokens of the unprompted pass
    grids: list             # per stage (gh, gw)
    raw_tokens: list        # per stage, patchified raw image (t_s, cum^2*3)
    xsp_raw: Tensor | None  # (h*w, C_1) superpixelated stage-1 features
    height: int
    width: int


def frozen_features(model: Model, img: ImageRGB) -> FrozenFeatures:
    """Unprompted embed tokens, raw patch tokens, and superpixel features.

    Everything here is built from frozen weights and the image, so nothing
    is recorded on a tape and the result can be cached per image.
    """
    cfg = model.cfg
    cfg.check_image_size(img.height, img.width)
    x0 = _image_tensor(img)
    cur = x0
    ch, cw = img.height, img.width
    embed_tokens, grids, raw_tokens = [], [], []
    stage1_out = None
    cum = cfg.cumulative_strides
    for si, stage in enumerate(model.stages):
        stride = cfg.patch_strides[si]
        k = 2 * stride - 1
        patches = ad.extract_patches(cur, ch, cw, k, stride, stride - 1)
        tokens = ad.layer_norm(
            ad.linear(patches, stage.embed_w, stage.embed_b),
            stage.embed_ln_g, stage.embed_ln_b,
        )
        ch, cw = ch // stride, cw // stride
        embed_tokens.append(tokens.detached())
        grids.append((ch, cw))
        raw_tokens.append(
            ad.extract_patches(x0, img.height, img.width, cum[si], cum[si], 0)
        )
        for blk in stage.blocks:
            tokens = _block_forward(tokens, blk)
        tokens = ad.layer_norm(tokens, stage.out_ln_g, stage.out_ln_b)
        if si == 0:
            stage1_out = tokens
        cur = tokens

    xsp_raw = None
    if model.flags.use_superpixels:
        feats = build_xylab(img, cfg.pos_scale)
        assoc, _ = sp.iterate(feats, cfg.superpixels, cfg.sp_iters, cfg.sp_temp)
        gh1, gw1 = grids[0]
        full = ad.upsample_bilinear(stage1_out, gh1, gw1, img.height, img.width)
        xsp_raw = sp.superpixelate(assoc, full)

    return FrozenFeatures(embed_tokens, grids, raw_tokens, xsp_raw,
                          img.height, img.width)


def compute_prompts(model: Model, img: ImageRGB,
                    frozen: FrozenFeatures | None = None) -> dict | None:
    """Per-stage PromptBundles for one image, or None for the unprompted
    variant. Gradients flow only into prompt parameters."""
    if not model.flags.use_prompts:
        return None
    if frozen is None:
        frozen = frozen_features(model, img)
    bundles = {}
    for s, pp in model.prompts.items():
        gh, gw = frozen.grids[s - 1]
        x_pe = pr.iegp_project(frozen.embed_tokens[s - 1], pp.iegp)
        x_sp = None
        if model.flags.use_superpixels:
            x_sp = pr.project_xsp(frozen.xsp_raw, frozen.height, frozen.width,
                                  gh, gw, pp.xsp_w, pp.xsp_b)
        p_j = None
        if model.flags.use_attention:
            p_j = pr.attention_prompt(frozen.raw_tokens[s - 1], pp.adapter)
        p_i_all, p_k_all = [], []
        for b in range(model.cfg.stage_depths[s - 1]):
            p_i = pr.adapter_prompt(x_pe, x_sp, b, pp.adapter)
            p_i_all.append(p_i)
            p_k_all.append(pr.combine(p_i, p_j) if p_j is not None else p_i)
        bundles[s] = PromptBundle(p_i=p_i_all, p_j=p_j, p_k=p_k_all)
    return bundles


# ---------------------------------------------------------------------------
# frozen/tunable partition and counting
# ---------------------------------------------------------------------------

def _prompt_stage_of(name: str) -> int | None:
    if name.startswith("prompt.stage"):
        return int(name.split(".", 2)[1][5:])
    return None


def partition(params: ModelParams, tuned_stages) -> tuple[list, list]:
    """Split all parameter names into (frozen, tunable).

    Prompt parameters of the given stages plus the decoder are tunable;
    everything else (backbone and out-of-set prompt parameters) is frozen.
    """
    tuned = set(tuned_stages)
    if not tuned <= {1, 2, 3, 4}:
        raise ConfigError(f"tuned_stages must be a subset of 1..4, got {sorted(tuned)}")
    frozen, tunable = [], []
    for name in params.names():
        stage = _prompt_stage_of(name)
        if name.startswith("decoder.") or (stage is not None and stage in tuned):
            tunable.append(name)
        else:
            frozen.append(name)
    return frozen, tunable


def apply_partition(params: ModelParams, tuned_stages) -> tuple[list, list]:
    """Partition and set requires_grad flags accordingly."""
    frozen, tunable = partition(params, tuned_stages)
    for name in frozen:
        params[name].set_requires_grad(False)
    for name in tunable:
        params[name].set_requires_grad(True)
    return frozen, tunable


def count_params(params: ModelParams, names) -> int:
    """Total number of scalar elements across the named tensors."""
    return int(sum(params[name].data.size for name in names))
