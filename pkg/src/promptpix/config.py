"""Run configuration: backbone geometry plus training settings.

A run is described by one flat JSON object covering both dataclasses;
``seed`` and ``tuned_stages`` are shared between them. Unknown or invalid
fields raise ConfigError naming the field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    """A configuration field is missing, unknown, or invalid."""


ABLATION_VARIANTS = (
    "decoder_only",
    "adapter_shared_tune",
    "adapter_per_block_up",
    "adapter_attention",
    "superpixel_adapter",
    "full",
)


@dataclass(frozen=True)
class VariantFlags:
    """Which prompt components an ablation variant wires up."""

    use_prompts: bool
    use_superpixels: bool
    share_tune: bool
    share_up: bool
    use_attention: bool


_VARIANT_FLAGS = {
    "decoder_only": VariantFlags(False, False, False, True, False),
    "adapter_shared_tune": VariantFlags(True, False, True, True, False),
    "adapter_per_block_up": VariantFlags(True, False, False, False, False),
    "adapter_attention": VariantFlags(True, False, False, True, True),
    "superpixel_adapter": VariantFlags(True, True, False, True, False),
    "full": VariantFlags(True, True, False, True, True),
}


def variant_flags(name: str) -> VariantFlags:
    try:
        return _VARIANT_FLAGS[name]
    except KeyError:
        raise ConfigError(
            f"ablation_variant: unknown variant {name!r}, expected one of {ABLATION_VARIANTS}"
        ) from None


@dataclass
class BackboneConfig:
    stage_depths: tuple = (2, 2, 2, 2)
    stage_widths: tuple = (16, 32, 64, 128)
    patch_strides: tuple = (4, 2, 2, 2)
    head_dims: tuple = (16, 32, 64, 128)
    tuned_stages: tuple = (1, 2, 3, 4)
    gamma: int = 4
    seed: int = 0
    mlp_ratio: float = 2.0
    decoder_hidden: int = 32
    prompt_attn_dim: int = 32
    superpixels: int = 16
    sp_iters: int = 5
    sp_temp: float = 1.0
    pos_scale: float = 1.0

    def __post_init__(self):
        for name in ("stage_depths", "stage_widths", "patch_strides", "head_dims", "tuned_stages"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("stage_depths", "stage_widths", "patch_strides", "head_dims"):
            val = getattr(self, name)
            if len(val) != 4 or any(int(v) != v or v < 1 for v in val):
                raise ConfigError(f"{name}: need 4 positive integers, got {val!r}")
        if any(s not in (1, 2, 3, 4) for s in self.tuned_stages):
            raise ConfigError(f"tuned_stages: entries must be in 1..4, got {self.tuned_stages!r}")
        if len(set(self.tuned_stages)) != len(self.tuned_stages):
            raise ConfigError(f"tuned_stages: duplicate entries in {self.tuned_stages!r}")
        if self.gamma < 1:
            raise ConfigError(f"gamma: must be a positive integer, got {self.gamma!r}")
        for w in self.stage_widths:
            if w % self.gamma:
                raise ConfigError(f"stage_widths: width {w} not divisible by gamma {self.gamma}")
        if self.superpixels < 1:
            raise ConfigError(f"superpixels: must be >= 1, got {self.superpixels!r}")
        if self.sp_iters < 1:
            raise ConfigError(f"sp_iters: must be >= 1, got {self.sp_iters!r}")
        if self.sp_temp <= 0 or self.pos_scale <= 0:
            raise ConfigError("sp_temp and pos_scale must be positive")

    @property
    def cumulative_strides(self) -> tuple:
        out, acc = [], 1
        for s in self.patch_strides:
            acc *= s
            out.append(acc)
        return tuple(out)

    def check_image_size(self, height: int, width: int) -> None:
        total = self.cumulative_strides[-1]
        if height % total or width % total:
            raise ConfigError(
                f"image {height}x{width} not divisible by cumulative stride {total}"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 4
    max_epochs: int = 50
    weight_decay: float = 1e-2
    seed: int = 0
    tuned_stages: tuple = (1, 2, 3, 4)
    ablation_variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "tuned_stages", tuple(self.tuned_stages))
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate: must be >= 0, got {self.learning_rate!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size!r}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs: must be >= 0, got {self.max_epochs!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay!r}")
        variant_flags(self.ablation_variant)


# shared between the two dataclasses; stored once in the JSON
_SHARED_FIELDS = ("seed", "tuned_stages")


def run_config_to_dict(backbone: BackboneConfig, train: TrainConfig) -> dict:
    merged = asdict(backbone)
    for key, val in asdict(train).items():
        if key in merged and key not in _SHARED_FIELDS:
            raise ConfigError(f"field collision on {key!r}")
        merged[key] = val
    return merged


def run_config_from_dict(raw: dict) -> tuple[BackboneConfig, TrainConfig]:
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    b_names = {f.name for f in fields(BackboneConfig)}
    t_names = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - b_names - t_names
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    try:
        backbone = BackboneConfig(**{k: v for k, v in raw.items() if k in b_names})
        train = TrainConfig(**{k: v for k, v in raw.items() if k in t_names})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return backbone, train


def load_run_config(path) -> tuple[BackboneConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(raw)


def save_run_config(backbone: BackboneConfig, train: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(backbone, train), fh, indent=2, sort_keys=True)
        fh.write("\n")
