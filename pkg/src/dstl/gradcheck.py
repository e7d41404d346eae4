"""Finite-difference verification of the analytic gradients.

Builds a small float64 encoder, evaluates the full three-level
distillation loss against a frozen teacher, and compares every parameter
tensor's backpropagated gradient with central finite differences. The
finite-difference side never touches autograd, so the two routes are
independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch

from . import encoder
from .distill import DistillWeights, total_loss
from .encoder import ParamSet, ViTConfig

__all__ = ["GradCheckResult", "finite_difference_grads", "run_gradcheck", "relative_errors"]

DEFAULT_EPS = 1e-4
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    per_tensor_max_rel: Dict[str, float]
    tolerance: float

    @property
    def max_rel(self) -> float:
        return max(self.per_tensor_max_rel.values())

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tolerance


def _as_double(params: ParamSet) -> ParamSet:
    return {k: v.detach().double() for k, v in params.items()}


def finite_difference_grads(params: ParamSet, config: ViTConfig, loss_fn,
                            img: torch.Tensor, eps: float = DEFAULT_EPS) -> ParamSet:
    """Central finite differences of ``loss_fn(forward(params))`` w.r.t.
    every parameter entry, in float64."""
    grads: ParamSet = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                plus = float(loss_fn(*encoder.forward(params, config, img)))
                flat[j] = orig - eps
                minus = float(loss_fn(*encoder.forward(params, config, img)))
                flat[j] = orig
                gflat[j] = (plus - minus) / (2.0 * eps)
            grads[name] = g
    return grads


def relative_errors(analytic: ParamSet, numeric: ParamSet,
                    floor: float = 1e-8) -> Dict[str, float]:
    """Per-tensor norm-relative error ||a - f|| / max(||a|| + ||f||, floor).

    The norm-wise ratio is the standard gradient-check measure; an
    elementwise ratio is dominated by finite-difference roundoff on
    entries whose true gradient is near zero.
    """
    out = {}
    for name in analytic:
        a = analytic[name].double()
        f = numeric[name].double()
        denom = max(float(a.norm() + f.norm()), floor)
        out[name] = float((a - f).norm()) / denom
    return out


def run_gradcheck(depth: int = 2, dim: int = 16, heads: int = 2,
                  image_size: int = 8, patch_size: int = 4,
                  weights: Optional[DistillWeights] = None, seed: int = 7,
                  eps: float = DEFAULT_EPS, tolerance: float = DEFAULT_TOLERANCE,
                  flip_sign_of: Optional[str] = None) -> GradCheckResult:
    """Full-suite gradient check of the combined distillation objective on
    a tiny float64 ViT.

    ``flip_sign_of`` is a fault-injection hook: the named tensor's analytic
    gradient is negated before comparison, which must fail the check.
    """
    weights = weights or DistillWeights()
    config = ViTConfig(image_size=image_size, patch_size=patch_size, channels=3,
                       dim=dim, depth=depth, heads=heads, mlp_ratio=2)
    gen = np.random.Generator(np.random.PCG64(seed))
    clean = gen.uniform(0.0, 1.0, size=(image_size, image_size, 3)).astype(np.float64)
    distorted = np.clip(clean + gen.normal(0, 0.3, clean.shape), 0, 1)

    teacher = _as_double(encoder.init_params(config, seed))
    # student perturbed away from the teacher so every loss term is active
    student = {
        k: v + torch.from_numpy(gen.normal(0, 0.01, v.shape)).double()
        for k, v in _as_double(encoder.init_params(config, seed)).items()
    }
    with torch.no_grad():
        t_out = encoder.forward(teacher, config, torch.from_numpy(clean))
    t_out = (t_out[0].detach(), t_out[1].detach())

    def loss_fn(tokens, attn_logits):
        total, _ = total_loss(t_out, (tokens, attn_logits), weights)
        return total

    img = torch.from_numpy(distorted)
    _, analytic = encoder.grad(student, config, loss_fn, img)
    if flip_sign_of is not None:
        analytic = dict(analytic)
        analytic[flip_sign_of] = -analytic[flip_sign_of]
    numeric = finite_difference_grads(student, config, loss_fn, img, eps=eps)
    return GradCheckResult(per_tensor_max_rel=relative_errors(analytic, numeric),
                           tolerance=tolerance)
