"""Distillation and fine-tuning loops: frozen teacher, AdamW with decoupled
weight decay, linear-warmup cosine learning-rate schedule, per-epoch
checkpoints, and per-step JSONL metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from . import data as data_mod
from . import encoder
from .data import AugmentParams, LabeledImage
from .distill import DistillWeights, total_loss
from .distortions import DistortionSpec
from .encoder import ParamSet, ViTConfig
from .errors import ConfigError, InputError, NumericalError

__all__ = [
    "TrainMode", "TrainConfig", "OptimizerState", "cosine_lr", "adamw_step",
    "distill_run", "finetune_run",
]


class TrainMode(str, Enum):
    DISTILL = "distill"
    FINETUNE = "finetune"
    SUPERVISED = "supervised"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_frac: float = 0.05
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    distortion: DistortionSpec = field(
        default_factory=lambda: DistortionSpec(kind="mask", mask_ratio=0.9)
    )
    weights: DistillWeights = field(default_factory=DistillWeights)
    mode: TrainMode = TrainMode.DISTILL
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.peak_lr > self.min_lr >= 0.0):
            raise ConfigError("require peak_lr > min_lr >= 0")

    def to_json(self) -> dict:
        d = {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "peak_lr": self.peak_lr, "min_lr": self.min_lr,
            "warmup_frac": self.warmup_frac, "weight_decay": self.weight_decay,
            "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "seed": self.seed, "deterministic": self.deterministic,
            "distortion": self.distortion.to_json(),
            "weights": self.weights.to_json(),
            "mode": self.mode.value,
            "augment": {"scale_range": list(self.augment.scale_range),
                        "flip_prob": self.augment.flip_prob},
        }
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "distortion" in obj:
            obj["distortion"] = DistortionSpec.from_json(obj["distortion"])
        if "weights" in obj:
            obj["weights"] = DistillWeights.from_json(obj["weights"])
        if "mode" in obj:
            obj["mode"] = TrainMode(obj["mode"])
        if "augment" in obj:
            a = obj["augment"]
            obj["augment"] = AugmentParams(tuple(a["scale_range"]), a["flip_prob"])
        return cls(**obj)


def cosine_lr(step: int, total_steps: int, peak: float, min_lr: float,
              warmup_steps: int) -> float:
    """Linear warmup 0 -> peak over ``warmup_steps``, then cosine annealing
    from peak down to ``min_lr`` at ``step == total_steps``."""
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be < total_steps")
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * progress))


# --- AdamW ------------------------------------------------------------------

def _no_decay(name: str) -> bool:
    # layer-norm gains/biases and the class token are exempt from decay
    return "norm" in name or name == "cls_token"


@dataclass
class OptimizerState:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimizerState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adamw_step(params: ParamSet, grads: ParamSet, state: OptimizerState,
               lr: float, config: TrainConfig) -> Tuple[ParamSet, OptimizerState]:
    """One AdamW update with bias-corrected moments and decoupled weight
    decay (applied multiplicatively to the weights, not through the
    gradient). Mutates and returns ``params`` and ``state``."""
    for name, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}; aborting step")
    state.step += 1
    t = state.step
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            if name not in grads:
                raise InputError(f"missing gradient for parameter {name!r}")
            g = grads[name]
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if config.weight_decay != 0.0 and not _no_decay(name):
                p.mul_(1.0 - lr * config.weight_decay)
            p.addcdiv_((m / bc1), (v / bc2).sqrt().add_(eps), value=-lr)
    return params, state


# --- run loops ---------------------------------------------------------------

class MetricsWriter:
    """JSONL metrics sink; one record per optimization step."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._f = open(self.path, "w")
        else:
            self._f = None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._f is not None:
            self._f.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._f is not None:
            self._f.close()
            self._f = None


def _plan_epoch(n: int, batch_size: int) -> int:
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    return n // batch_size  # trailing partial batch dropped


def _schedule(config: TrainConfig, steps_per_epoch: int) -> Tuple[int, int]:
    total = config.epochs * steps_per_epoch
    warmup = int(round(config.warmup_frac * total))
    warmup = min(warmup, max(total - 1, 0))
    return total, warmup


def _run_dir(out_dir) -> Optional[Path]:
    if out_dir is None:
        return None
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def distill_run(teacher: ParamSet, student: ParamSet, vit: ViTConfig,
                config: TrainConfig, samples: Sequence[LabeledImage],
                out_dir=None) -> Tuple[ParamSet, List[dict]]:
    """Distill ``student`` toward the frozen ``teacher``.

    Per step: build a clean/distorted pair batch, teacher forward on the
    clean view (no gradients), student forward on the distorted view,
    three-level loss, backprop into the student only, AdamW update.
    Checkpoints the student each epoch when ``out_dir`` is given. The
    teacher is never modified.
    """
    if config.deterministic:
        torch.manual_seed(config.seed)
    run = _run_dir(out_dir)
    if run is not None:
        (run / "config.json").write_text(json.dumps(config.to_json(), indent=2))
    metrics = MetricsWriter(run / "metrics.jsonl" if run else None)

    teacher = {k: v.detach() for k, v in teacher.items()}
    student = {k: v.detach().clone().requires_grad_(True) for k, v in student.items()}
    state = OptimizerState.zeros_like(student)
    n = len(samples)
    steps_per_epoch = _plan_epoch(n, config.batch_size)
    total_steps, warmup = _schedule(config, steps_per_epoch)

    step = 0
    try:
        for epoch in range(config.epochs):
            perm = data_mod.epoch_permutation(n, config.seed, epoch)
            for b in range(steps_per_epoch):
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                batch = data_mod.make_pair_batch(
                    samples, config.distortion, idx, config.seed, epoch, config.augment
                )
                with torch.no_grad():
                    t_out = encoder.forward(teacher, vit, batch.clean)
                s_out = encoder.forward(student, vit, batch.distorted)
                loss, breakdown = total_loss(t_out, s_out, config.weights)
                if not math.isfinite(breakdown.total):
                    raise NumericalError(
                        f"non-finite distillation loss at step {step}: {breakdown}"
                    )
                lr = cosine_lr(step, total_steps, config.peak_lr, config.min_lr, warmup)
                grads = _grads_of(loss, student)
                adamw_step(student, grads, state, lr, config)
                metrics.write({"step": step, "epoch": epoch, "lr": lr,
                               **breakdown.to_json(), "mode": config.mode.value})
                step += 1
            if run is not None:
                encoder.save_checkpoint(run / f"{epoch}.ckpt", student, vit)
    finally:
        metrics.close()
    return {k: v.detach() for k, v in student.items()}, metrics.records


def _grads_of(loss: torch.Tensor, params: ParamSet) -> ParamSet:
    names = list(params)
    if not loss.requires_grad:
        return {n: torch.zeros_like(params[n]) for n in names}
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


def finetune_run(params: ParamSet, vit: ViTConfig, config: TrainConfig,
                 samples: Sequence[LabeledImage], num_classes: int,
                 label_fraction: float = 1.0, out_dir=None
                 ) -> Tuple[ParamSet, ViTConfig, List[dict]]:
    """Supervised fine-tuning with cross-entropy on distorted images.

    Attaches a fresh classifier head, optionally restricts to a stratified
    ``label_fraction`` subset, and trains all parameters. The same
    distortion spec is applied during training as will be used at eval.
    """
    if config.deterministic:
        torch.manual_seed(config.seed)
    run = _run_dir(out_dir)
    if run is not None:
        (run / "config.json").write_text(json.dumps(config.to_json(), indent=2))
    metrics = MetricsWriter(run / "metrics.jsonl" if run else None)

    model, cfg = encoder.attach_head(params, vit, num_classes, seed=config.seed)
    model = {k: v.requires_grad_(True) for k, v in model.items()}
    state = OptimizerState.zeros_like(model)

    labels = [s.label for s in samples]
    subset = data_mod.stratified_subset(labels, label_fraction, config.seed)
    n = len(subset)
    # small label fractions may undershoot the configured batch size
    batch_size = min(config.batch_size, n)
    steps_per_epoch = _plan_epoch(n, batch_size)
    total_steps, warmup = _schedule(config, steps_per_epoch)

    step = 0
    try:
        for epoch in range(config.epochs):
            perm = data_mod.epoch_permutation(n, config.seed, epoch)
            for b in range(steps_per_epoch):
                idx = subset[perm[b * batch_size:(b + 1) * batch_size]]
                batch = data_mod.make_pair_batch(
                    samples, config.distortion, idx, config.seed, epoch, config.augment
                )
                logits = encoder.classify(model, cfg, batch.distorted)
                target = torch.from_numpy(batch.labels)
                loss = F.cross_entropy(logits, target)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite fine-tune loss at step {step}")
                lr = cosine_lr(step, total_steps, config.peak_lr, config.min_lr, warmup)
                grads = _grads_of(loss, model)
                adamw_step(model, grads, state, lr, config)
                metrics.write({"step": step, "epoch": epoch, "lr": lr,
                               "loss_total": float(loss.detach()), "loss_cls": 0.0,
                               "loss_patch": 0.0, "loss_attn": 0.0,
                               "mode": config.mode.value})
                step += 1
            if run is not None:
                encoder.save_checkpoint(run / f"{epoch}.ckpt", model, cfg)
    finally:
        metrics.close()
    return {k: v.detach() for k, v in model.items()}, cfg, metrics.records
