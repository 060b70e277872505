"""Densities, divergences and reparameterized samplers used by the bounds.

All functions operate on the trailing dimension and broadcast over any
leading batch dimensions. Natural logarithms throughout.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

UNIFORM_FLOOR = 1e-10


class GaussianPosterior(NamedTuple):
    """Diagonal Gaussian ``N(mean, exp(log_variance))``."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return self.log_variance.exp()

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        return (
            -0.5 * (math.log(2 * math.pi) + self.log_variance + (z - self.mean) ** 2 / self.variance)
        ).sum(-1)


class ClassPosterior(NamedTuple):
    logits: torch.Tensor

    @property
    def probabilities(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=-1)

    @property
    def log_probabilities(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)


class RelaxedOneHot(NamedTuple):
    values: torch.Tensor
    temperature: float


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite Gaussian parameters")


def kl_to_standard_normal(q: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)) summed over the latent dimension."""
    _check_finite(q.mean, q.log_variance)
    return 0.5 * (q.mean**2 + q.log_variance.exp() - 1.0 - q.log_variance).sum(-1)


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    return (-0.5 * (math.log(2 * math.pi) + z**2)).sum(-1)


def gaussian_rsample(q: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != q.mean.shape[-1]:
        raise ValueError(f"noise length {noise.shape[-1]} does not match latent size {q.mean.shape[-1]}")
    return q.mean + torch.exp(0.5 * q.log_variance) * noise


def categorical_entropy(probs: torch.Tensor | ClassPosterior) -> torch.Tensor:
    """``-sum p log p`` with ``0 log 0 = 0``.

    A ClassPosterior uses its log-softmax directly, which keeps the gradient
    finite when some probabilities underflow.
    """
    if isinstance(probs, ClassPosterior):
        p, logp = probs.probabilities, probs.log_probabilities
    else:
        p = probs
        logp = torch.log(torch.where(p > 0, p, torch.ones_like(p)))
    return -(torch.where(p > 0, p * logp, torch.zeros_like(p))).sum(-1)


def gumbel_from_uniform(uniform_noise: torch.Tensor) -> torch.Tensor:
    # 1 - 1e-10 rounds to 1 in float32, so the upper clamp respects the dtype
    top = 1.0 - max(UNIFORM_FLOOR, torch.finfo(uniform_noise.dtype).eps)
    u = uniform_noise.clamp(UNIFORM_FLOOR, top)
    return -torch.log(-torch.log(u))


def gumbel_softmax_sample(logits: torch.Tensor, tau: float, uniform_noise: torch.Tensor) -> RelaxedOneHot:
    """Relaxed categorical sample ``softmax((logits + g) / tau)``.

    No straight-through rounding: the relaxed vector is returned as-is.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    g = gumbel_from_uniform(uniform_noise)
    return RelaxedOneHot(F.softmax((logits + g) / tau, dim=-1), float(tau))


def categorical_log_prob(q: ClassPosterior, y: torch.Tensor | int) -> torch.Tensor:
    logp = q.log_probabilities
    if isinstance(y, int):
        return logp[..., y]
    return logp.gather(-1, y.long().unsqueeze(-1)).squeeze(-1)
