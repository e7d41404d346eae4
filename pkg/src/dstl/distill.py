"""The three-level alignment objective: class-token MSE, per-patch MSE,
and per-head temperature-softened KL over class-token attention logits.

All functions accept either single-sample tensors (matching the shapes in
their docstrings) or tensors with one extra leading batch dimension, in
which case the loss is averaged over the batch. Teacher-side inputs are
detached internally so no gradient ever flows to the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InputError, ParameterError

__all__ = ["DistillWeights", "LossBreakdown", "loss_cls", "loss_patch", "loss_attn", "total_loss"]


@dataclass(frozen=True)
class DistillWeights:
    """Loss weights and attention temperature. Defaults follow the values
    that balance the probability-scale attention term against the two
    MSE terms."""

    lambda_cls: float = 1.0
    lambda_patch: float = 1.0
    lambda_attn: float = 50.0
    tau: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_patch, self.lambda_attn) < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")

    def to_json(self) -> dict:
        return {"lambda_cls": self.lambda_cls, "lambda_patch": self.lambda_patch,
                "lambda_attn": self.lambda_attn, "tau": self.tau}

    @classmethod
    def from_json(cls, obj: dict) -> "DistillWeights":
        return cls(**obj)


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    patch: float
    attn: float
    total: float

    def to_json(self) -> dict:
        return {"loss_cls": self.cls, "loss_patch": self.patch,
                "loss_attn": self.attn, "loss_total": self.total}


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_cls(h_s: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between class tokens, summed over the embedding
    dimension; batch mean over any leading dimension."""
    _check_same_shape(h_s, h_t, "class token")
    sq = ((h_s - h_t.detach()) ** 2).sum(dim=-1)
    return sq.mean() if sq.ndim else sq


def loss_patch(h_s: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
    """Mean over patch positions of summed squared L2 distance per patch
    ((1/P) sum_p ||h_s^p - h_t^p||^2); batch mean over any leading dim."""
    _check_same_shape(h_s, h_t, "patch tokens")
    if h_s.ndim < 2:
        raise InputError(f"patch tokens must be at least (P, d), got {tuple(h_s.shape)}")
    return ((h_s - h_t.detach()) ** 2).sum(dim=-1).mean(dim=-1).mean()


def loss_attn(a_t: torch.Tensor, a_s: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-head forward KL between temperature-softened attention
    distributions, KL(softmax(a_t/tau) || softmax(a_s/tau)), averaged over
    heads (and over any leading batch dim). Gradient flows only through
    the student logits ``a_s``."""
    if tau <= 0:
        raise InputError(f"tau must be > 0, got {tau}")
    _check_same_shape(a_t, a_s, "attention logits")
    if a_t.ndim < 2:
        raise InputError(f"attention logits must be at least (K, P), got {tuple(a_t.shape)}")
    log_p = F.log_softmax(a_t.detach() / tau, dim=-1)
    log_q = F.log_softmax(a_s / tau, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)  # (..., K)
    return kl.mean(dim=-1).mean()


def total_loss(teacher_out, student_out, w: DistillWeights):
    """Weighted combination of the three components.

    ``teacher_out`` / ``student_out`` are (tokens, attn_logits) pairs as
    returned by the encoder forward: tokens (..., P+1, d), attention
    logits (..., K, P). Returns ``(total, LossBreakdown)`` where ``total``
    is the differentiable scalar (gradients w.r.t. student outputs only)
    and the breakdown holds detached component values.

    A component with zero weight is skipped entirely, so a zeroed lambda
    is exactly the term-removed computation.
    """
    t_tokens, t_attn = teacher_out
    s_tokens, s_attn = student_out
    _check_same_shape(t_tokens, s_tokens, "token sequence")
    _check_same_shape(t_attn, s_attn, "attention logits")

    zero = torch.zeros((), dtype=s_tokens.dtype, device=s_tokens.device)
    l_cls = loss_cls(s_tokens[..., 0, :], t_tokens[..., 0, :]) if w.lambda_cls != 0 else zero
    l_patch = loss_patch(s_tokens[..., 1:, :], t_tokens[..., 1:, :]) if w.lambda_patch != 0 else zero
    l_attn = loss_attn(t_attn, s_attn, w.tau) if w.lambda_attn != 0 else zero

    total = w.lambda_cls * l_cls + w.lambda_patch * l_patch + w.lambda_attn * l_attn
    breakdown = LossBreakdown(
        cls=float(l_cls.detach()), patch=float(l_patch.detach()),
        attn=float(l_attn.detach()), total=float(total.detach()),
    )
    return total, breakdown
