"""Loss, optimizer, training loop, and dataset-level evaluation.

The loss is class-balanced binary cross-entropy: with beta the background
fraction of the mask, foreground terms are weighted by beta and background
terms by 1 - beta, computed from logits in the numerically stable softplus
form. Optimization is AdamW (decoupled weight decay) over the tunable
tensors only. Training is deterministic given the seed: per-epoch shuffles
come from one seeded generator and batch gradients accumulate in index
order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import ShapeError, Tape, Tensor
from .config import ABLATION_VARIANTS, BackboneConfig, TrainConfig
from .images import BinaryMask
from .metrics import MetricReport, evaluate


class NonFiniteLossError(ArithmeticError):
    """Training aborted because the loss left the finite range."""


def bbce_loss(logits: Tensor, mask) -> Tensor:
    """Class-balanced BCE over all pixels, from logits.

    beta = (#background) / (#pixels); loss is the mean over pixels of
    beta * y * softplus(-z) + (1 - beta) * (1 - y) * softplus(z).
    """
    y = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    y = y.reshape(-1, 1).astype(np.float64)
    if y.size == 0:
        raise ValueError("mask has no pixels")
    if logits.data.shape != y.shape:
        raise ShapeError(f"logits {logits.data.shape} vs mask {y.shape}")
    beta = float((1.0 - y).sum() / y.size)
    w_fg = Tensor(beta * y)
    w_bg = Tensor((1.0 - beta) * (1.0 - y))
    fg_term = ad.mul(w_fg, ad.softplus(ad.scale(logits, -1.0)))
    bg_term = ad.mul(w_bg, ad.softplus(logits))
    return ad.mean_all(ad.add(fg_term, bg_term))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: bb.ModelParams,
    names,
    state: AdamWState,
    lr: float,
    weight_decay: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected AdamW update over the named tunable tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in names:
        tensor = params[name]
        g = tensor.grad
        if g is None:
            raise ValueError(f"{name}: no gradient buffer; is it tunable?")
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        tensor.data -= lr * (update + weight_decay * tensor.data)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _prediction(model: bb.Model, sample, frozen=None, stage_cache=None) -> Tensor:
    """Logits for one sample; reuses cached frozen activations when given."""
    if stage_cache is not None:
        return bb.decode(model, stage_cache, sample.image.height, sample.image.width)
    prompts = bb.compute_prompts(model, sample.image, frozen)
    return bb.forward(model, sample.image, prompts)


@dataclass
class TrainResult:
    losses: list            # per-epoch mean loss
    tunable_names: list
    epochs: int
    steps: int


def train(model: bb.Model, samples: list, cfg: TrainConfig, log=None) -> TrainResult:
    """Train the tunable partition of the model on (image, mask) samples."""
    if not samples:
        raise ValueError("empty dataset")
    _, tunable = bb.apply_partition(model.params, cfg.tuned_stages)
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()

    # frozen activations are constant per image; cache what each variant reuses
    frozen_cache: list = [None] * len(samples)
    stage_cache: list = [None] * len(samples)
    cache_stages = not model.flags.use_prompts

    losses = []
    steps = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            for name in tunable:
                model.params[name].zero_grad()
            with Tape() as tape:
                total = None
                for idx in batch:
                    s = samples[idx]
                    if cache_stages:
                        if stage_cache[idx] is None:
                            stage_cache[idx] = bb.encode(model, s.image, None)
                        logits = _prediction(model, s, stage_cache=stage_cache[idx])
                    else:
                        if frozen_cache[idx] is None:
                            frozen_cache[idx] = bb.frozen_features(model, s.image)
                        logits = _prediction(model, s, frozen=frozen_cache[idx])
                    loss = bbce_loss(logits, s.mask)
                    total = loss if total is None else ad.add(total, loss)
                batch_loss = ad.scale(total, 1.0 / len(batch))
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss {value} at epoch {epoch}, step {steps}, "
                        f"batch indices {batch.tolist()}"
                    )
                tape.backward(batch_loss)
            adamw_step(model.params, tunable, state, cfg.learning_rate, cfg.weight_decay)
            batch_losses.append(value)
            steps += 1
        losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.max_epochs}: loss {losses[-1]:.6f}")
    return TrainResult(losses=losses, tunable_names=tunable, epochs=cfg.max_epochs, steps=steps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_map(model: bb.Model, image) -> np.ndarray:
    """Sigmoid probability map (h, w) for one image."""
    prompts = bb.compute_prompts(model, image)
    logits = bb.forward(model, image, prompts)
    z = logits.data.reshape(image.height, image.width)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def _eval_threads() -> int:
    raw = os.environ.get("PROMPTPIX_THREADS", "")
    if raw.strip():
        return max(1, int(raw))
    return min(8, os.cpu_count() or 1)


def evaluate_dataset(model: bb.Model, samples: list) -> list:
    """MetricReport per sample; fans out across threads (PROMPTPIX_THREADS)."""
    def one(sample):
        return evaluate(predict_map(model, sample.image), sample.mask)

    workers = _eval_threads()
    if workers == 1 or len(samples) <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


def summarize(reports: list) -> MetricReport:
    """Mean of each metric over per-sample reports."""
    arr = np.array([[r.dice, r.miou, r.mae, r.accuracy, r.s_measure, r.e_measure]
                    for r in reports])
    mean = arr.mean(axis=0)
    return MetricReport(*[float(x) for x in mean])


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def run_ablation(
    base_backbone: BackboneConfig,
    base_train: TrainConfig,
    train_samples: list,
    test_samples: list,
    variants=ABLATION_VARIANTS,
    log=None,
) -> dict:
    """Train and evaluate every architecture variant under one config.

    Returns variant -> {"summary": MetricReport, "losses": [...],
    "tunable_params": int, "seconds": float}.
    """
    results = {}
    for variant in variants:
        t0 = time.perf_counter()
        model = bb.build_model(base_backbone, variant)
        tcfg = TrainConfig(
            learning_rate=base_train.learning_rate,
            batch_size=base_train.batch_size,
            max_epochs=base_train.max_epochs,
            weight_decay=base_train.weight_decay,
            seed=base_train.seed,
            tuned_stages=base_train.tuned_stages,
            ablation_variant=variant,
        )
        result = train(model, train_samples, tcfg)
        reports = evaluate_dataset(model, test_samples)
        results[variant] = {
            "summary": summarize(reports),
            "losses": result.losses,
            "tunable_params": bb.count_params(model.params, result.tunable_names),
            "seconds": time.perf_counter() - t0,
        }
        if log is not None:
            s = results[variant]["summary"]
            log(f"{variant}: dice {s.dice:.4f} miou {s.miou:.4f} "
                f"({results[variant]['tunable_params']} tunable params)")
    return results
