"""Loss terms and schedules for the two-level distillation objective.

Multi-label logits are softened per AU as two-point Bernoulli distributions
``[sigmoid(x/T), 1 - sigmoid(x/T)]`` rather than a softmax across AUs, which
would force co-occurring AUs to compete. All probabilities are clamped to
``[EPS, 1 - EPS]`` before any log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .core import ConfigError, HyperParams

EPS = 1e-7


def bernoulli_soften(logits: Tensor, temperature: float) -> Tensor:
    """Per-AU soft occurrence probabilities at the given temperature."""
    return torch.sigmoid(logits / temperature).clamp(EPS, 1.0 - EPS)


def _bernoulli_kl(q: Tensor, p: Tensor) -> Tensor:
    """Elementwise KL(q || p) over two-point distributions (q, 1-q) vs (p, 1-p)."""
    return q * torch.log(q / p) + (1.0 - q) * torch.log((1.0 - q) / (1.0 - p))


def kl_distill(
    p_logits: Tensor,
    w_logits: Tensor,
    temperature: float,
    batch_size: int,
    direction: str = "ensemble_to_student",
) -> Tensor:
    """Mutual distillation toward the mean-logit ensemble.

    The soft target q comes from the elementwise mean of the two logit sets
    and is treated as a constant (no gradient). Returns
    ``(T^2 / b) * sum_AU[KL(q||p) + KL(q||w)]`` for the default direction;
    ``student_to_ensemble`` flips each KL's argument order.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    z = 0.5 * (p_logits + w_logits)
    q = bernoulli_soften(z, temperature).detach()
    p = bernoulli_soften(p_logits, temperature)
    w = bernoulli_soften(w_logits, temperature)
    if direction == "ensemble_to_student":
        total = _bernoulli_kl(q, p).sum() + _bernoulli_kl(q, w).sum()
    elif direction == "student_to_ensemble":
        total = _bernoulli_kl(p, q).sum() + _bernoulli_kl(w, q).sum()
    else:
        raise ConfigError(f"unknown kl_direction {direction!r}")
    return (temperature**2 / batch_size) * total


def weighted_bce(logits: Tensor, targets: Tensor, weights: Tensor) -> Tensor:
    """Class-weighted binary cross entropy with logits, averaged over AUs.

    The per-AU weight applies to the positive term only. Leading batch
    dimensions are averaged as well.
    """
    probs = torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)
    targets = targets.to(probs.dtype)
    elem = -(weights * targets * torch.log(probs) + (1.0 - targets) * torch.log(1.0 - probs))
    return elem.mean()


def composite_supervised(
    logits_a: Tensor,
    logits_b: Tensor,
    targets: Tensor,
    weights: Tensor,
    alpha: float,
    kl_term: Tensor | float,
) -> Tensor:
    """Sum of the pair's two weighted BCEs plus alpha times their distillation term."""
    return weighted_bce(logits_a, targets, weights) + weighted_bce(logits_b, targets, weights) + alpha * kl_term


def pseudo_bce_per_clip(logits: Tensor, pseudo_targets: Tensor, weights: Tensor) -> Tensor:
    """Per-clip pseudo-label loss: sum over unlabeled positions of weighted BCE.

    ``logits`` and ``pseudo_targets`` are (b, n-1, U) or (n-1, U); returns a
    (b,) vector (scalar tensor of shape () becomes (1,)-like handling is left
    to the caller for the single-clip case).
    """
    probs = torch.sigmoid(logits).clamp(EPS, 1.0 - EPS)
    pseudo_targets = pseudo_targets.to(probs.dtype)
    elem = -(weights * pseudo_targets * torch.log(probs) + (1.0 - pseudo_targets) * torch.log(1.0 - probs))
    # mean over AUs, sum over clip positions
    return elem.mean(dim=-1).sum(dim=-1)


def pseudo_bce(logits: Tensor, pseudo_targets: Tensor, weights: Tensor) -> Tensor:
    """Batch pseudo-label loss: per-clip position-sum, averaged over the batch."""
    per_clip = pseudo_bce_per_clip(logits, pseudo_targets, weights)
    return per_clip.mean()


def ramp_weight(x: float, omega: float, mu: float, sigma: float, warmup_epochs: int) -> float:
    """Gaussian warm-up coefficient in (0, 1].

    ``x`` counts completed epochs. Below ``warmup_epochs`` the curve is
    ``exp(-omega * (1 - (x - mu)^2 / sigma^2))`` capped at 1; at or beyond the
    warm-up boundary it is exactly 1.
    """
    if sigma == 0:
        raise ConfigError("ramp sigma must be nonzero")
    if x < 0:
        raise ValueError("epoch count must be non-negative")
    if x >= warmup_epochs:
        return 1.0
    return min(1.0, math.exp(-omega * (1.0 - (x - mu) ** 2 / sigma**2)))


@dataclass(frozen=True)
class LossBreakdown:
    """All terms of one optimization step, post-gating, as plain floats."""

    l_skd: float
    l_tkd: float
    l_bce_ensemble: float
    l_s: float
    l_t: float
    l_ssl: float
    l_semi: float
    w_ramp: float
    l_total: float

    CSV_FIELDS = (
        "l_skd",
        "l_tkd",
        "l_bce_ensemble",
        "l_s",
        "l_t",
        "l_ssl",
        "l_semi",
        "w_ramp",
        "l_total",
    )

    def as_csv_row(self) -> list[str]:
        return [f"{getattr(self, name):.10g}" for name in self.CSV_FIELDS]


def total_loss(
    *,
    l_s: Tensor,
    l_bce_ensemble: Tensor,
    l_t: Tensor,
    l_ssl: Tensor,
    l_semi_per_clip: Tensor,
    tpl_mask: Tensor,
    epoch: int,
    hp: HyperParams,
    l_skd: Tensor | float = 0.0,
    l_tkd: Tensor | float = 0.0,
) -> tuple[Tensor, LossBreakdown]:
    """Compose the step objective and its breakdown.

    ``l_semi_per_clip`` is a (b,) vector of per-clip pseudo-label losses;
    clips whose gate verdict is False, and every clip while
    ``epoch < hp.tpl_start_epoch`` (gate warm-up, skipped when the gate is
    disabled), contribute exactly zero. The composed total is
    ``lambda1*L_s + w_ramp*(L_bce + lambda2*L_t + lambda3*L_ssl +
    lambda4*L_semi)`` with w_ramp driven by completed epochs.
    """
    mask = tpl_mask.to(l_semi_per_clip.dtype)
    if hp.tpl_enabled and epoch < hp.tpl_start_epoch:
        mask = torch.zeros_like(mask)
    batch = l_semi_per_clip.shape[0]
    l_semi = (l_semi_per_clip * mask).sum() / batch
    w = ramp_weight(epoch - 1, hp.ramp_omega, hp.ramp_mu, hp.ramp_sigma, hp.warmup_epochs)
    total = hp.lambda1 * l_s + w * (
        l_bce_ensemble + hp.lambda2 * l_t + hp.lambda3 * l_ssl + hp.lambda4 * l_semi
    )
    breakdown = LossBreakdown(
        l_skd=_scalar(l_skd),
        l_tkd=_scalar(l_tkd),
        l_bce_ensemble=_scalar(l_bce_ensemble),
        l_s=_scalar(l_s),
        l_t=_scalar(l_t),
        l_ssl=_scalar(l_ssl),
        l_semi=_scalar(l_semi),
        w_ramp=float(w),
        l_total=_scalar(total),
    )
    return total, breakdown


def _scalar(value: Tensor | float) -> float:
    if isinstance(value, Tensor):
        return float(value.detach())
    return float(value)
