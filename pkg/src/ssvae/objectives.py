"""Variational bounds for labeled and unlabeled records and the training objective.

Every bound is a per-record sum over voxels and channels (not a mean), and
is returned as a value to maximize. Each function takes its noise explicitly
so that estimates are reproducible and can be compared term by term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

from ssvae.distributions import (
    ClassPosterior,
    categorical_entropy,
    categorical_log_prob,
    gaussian_rsample,
    gumbel_softmax_sample,
    kl_to_standard_normal,
)
from ssvae.networks import SemiSupervisedVAE

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 4.39168
    beta: float = 1.0
    gamma: float = 1.0
    tau: float = 1.0
    class_count: int = 3
    likelihood: str = "bernoulli"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.likelihood not in ("bernoulli", "categorical"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @property
    def log_prior(self) -> float:
        return -math.log(self.class_count)


@dataclass
class BoundValue:
    """Per-record bound terms; shapes (B,).

    ``total = reconstruction + log_prior - beta * kl + gamma * entropy``.
    ``class_log_prob`` (labeled records) is reported alongside but is not part
    of ``total``; the training objective adds it with weight alpha.
    """

    total: torch.Tensor
    reconstruction: torch.Tensor
    kl: torch.Tensor
    log_prior: torch.Tensor
    entropy: torch.Tensor
    class_log_prob: torch.Tensor | None = None

    def sum(self) -> dict[str, float]:
        out = {
            "total": float(self.total.detach().sum()),
            "reconstruction": float(self.reconstruction.detach().sum()),
            "kl": float(self.kl.detach().sum()),
            "log_prior": float(self.log_prior.detach().sum()),
            "entropy": float(self.entropy.detach().sum()),
        }
        out["class_log_prob"] = 0.0 if self.class_log_prob is None else float(self.class_log_prob.detach().sum())
        return out


def reconstruction_log_likelihood(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Per-channel Bernoulli log-likelihood summed over channels and voxels.

    Works on a single volume (C, d1, d2, d3) -> scalar or a batch -> (B,).
    Probabilities are clamped to [eps, 1 - eps].
    """
    if target.shape != probs.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs probs {tuple(probs.shape)}")
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    ll = target * torch.log(p) + (1 - target) * torch.log1p(-p)
    return ll.sum(dim=tuple(range(-4, 0)))


def reconstruction_from_logits(target: torch.Tensor, logits: torch.Tensor, likelihood: str = "bernoulli") -> torch.Tensor:
    """Same quantity as ``reconstruction_log_likelihood`` computed stably from pre-sigmoid logits.

    ``likelihood="categorical"`` treats the channels as one softmax per voxel instead.
    """
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs logits {tuple(logits.shape)}")
    if likelihood == "bernoulli":
        ll = -F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    elif likelihood == "categorical":
        ll = target * F.log_softmax(logits, dim=-4)
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    return ll.sum(dim=tuple(range(-4, 0)))


def _bound_given_embedding(model, h1, x, e, cfg: ObjectiveConfig, noise_z):
    q = model.encoder.from_features(h1, e)
    z = gaussian_rsample(q, noise_z)
    recon = reconstruction_from_logits(x, model.decode_logits(z, e), cfg.likelihood)
    kl = kl_to_standard_normal(q)
    return recon, kl


def labeled_bound(
    x: torch.Tensor,
    y: torch.Tensor,
    model: SemiSupervisedVAE,
    cfg: ObjectiveConfig,
    noise_z: torch.Tensor,
    h1: torch.Tensor | None = None,
) -> BoundValue:
    """Single-sample estimate of L(x, y) for a batch of labeled records."""
    if h1 is None:
        h1 = model.features(x)
    e = model.embed_label(y)
    recon, kl = _bound_given_embedding(model, h1, x, e, cfg, noise_z)
    log_prior = torch.full_like(recon, cfg.log_prior)
    zero = torch.zeros_like(recon)
    clp = categorical_log_prob(model.classify(h1), y)
    total = recon + log_prior - cfg.beta * kl
    return BoundValue(total, recon, kl, log_prior, zero, clp)


def unlabeled_bound_relaxed(
    x: torch.Tensor,
    model: SemiSupervisedVAE,
    cfg: ObjectiveConfig,
    noise_y: torch.Tensor,
    noise_z: torch.Tensor,
    h1: torch.Tensor | None = None,
) -> BoundValue:
    """U(x) estimated with one Gumbel-Softmax label sample fed through the soft embedding."""
    if h1 is None:
        h1 = model.features(x)
    qy = model.classify(h1)
    y_soft = gumbel_softmax_sample(qy.logits, cfg.tau, noise_y).values
    recon, kl = _bound_given_embedding(model, h1, x, model.embed_label(y_soft), cfg, noise_z)
    log_prior = torch.full_like(recon, cfg.log_prior)
    ent = categorical_entropy(qy)
    total = recon + log_prior - cfg.beta * kl + cfg.gamma * ent
    return BoundValue(total, recon, kl, log_prior, ent)


def unlabeled_bound_exact(
    x: torch.Tensor,
    model: SemiSupervisedVAE,
    cfg: ObjectiveConfig,
    noise_z: torch.Tensor,
    h1: torch.Tensor | None = None,
) -> BoundValue:
    """U(x) with the class sum done exactly; the z-noise is shared across classes."""
    if h1 is None:
        h1 = model.features(x)
    qy = model.classify(h1)
    probs = qy.probabilities
    recon = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
    kl = torch.zeros_like(recon)
    for k in range(cfg.class_count):
        yk = torch.full((x.shape[0],), k, dtype=torch.long, device=x.device)
        r, d = _bound_given_embedding(model, h1, x, model.embed_label(yk), cfg, noise_z)
        recon = recon + probs[:, k] * r
        kl = kl + probs[:, k] * d
    log_prior = torch.full_like(recon, cfg.log_prior)
    ent = categorical_entropy(qy)
    total = recon + log_prior - cfg.beta * kl + cfg.gamma * ent
    return BoundValue(total, recon, kl, log_prior, ent)


@dataclass
class ObjectiveNoise:
    """Exogenous noise for one objective evaluation."""

    labeled_z: torch.Tensor
    unlabeled_z: torch.Tensor
    unlabeled_y: torch.Tensor

    @classmethod
    def sample(
        cls,
        n_labeled: int,
        n_unlabeled: int,
        latent_size: int,
        class_count: int,
        gaussian: torch.Generator | None = None,
        gumbel: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "ObjectiveNoise":
        return cls(
            torch.randn(n_labeled, latent_size, generator=gaussian, dtype=dtype),
            torch.randn(n_unlabeled, latent_size, generator=gaussian, dtype=dtype),
            torch.rand(n_unlabeled, class_count, generator=gumbel, dtype=dtype),
        )

    def select(self, labeled: slice | list[int], unlabeled: slice | list[int]) -> "ObjectiveNoise":
        return ObjectiveNoise(self.labeled_z[labeled], self.unlabeled_z[unlabeled], self.unlabeled_y[unlabeled])


@dataclass
class ObjectiveValue:
    total: torch.Tensor
    labeled: BoundValue | None
    unlabeled: BoundValue | None
    alpha: float

    def terms(self) -> dict[str, float]:
        """Batch sums of every term; ``total`` recombines from the others."""
        parts = {"reconstruction": 0.0, "kl": 0.0, "entropy": 0.0, "log_prior": 0.0, "class_log_prob": 0.0}
        for b in (self.labeled, self.unlabeled):
            if b is None:
                continue
            for k, v in b.sum().items():
                if k != "total":
                    parts[k] += v
        parts["total"] = float(self.total.detach())
        return parts


def combined_objective(
    x_labeled: torch.Tensor | None,
    y_labeled: torch.Tensor | None,
    x_unlabeled: torch.Tensor | None,
    model: SemiSupervisedVAE,
    cfg: ObjectiveConfig,
    noise: ObjectiveNoise,
    estimator: str = "relaxed",
) -> ObjectiveValue:
    """sum L + sum U + alpha * sum log q(y|x), to be maximized.

    Either batch may be empty or None, not both.
    """
    has_l = x_labeled is not None and x_labeled.shape[0] > 0
    has_u = x_unlabeled is not None and x_unlabeled.shape[0] > 0
    if not (has_l or has_u):
        raise ValueError("combined_objective needs at least one labeled or unlabeled record")
    if estimator == "relaxed" and has_l and has_u:
        return _combined_relaxed_fused(x_labeled, y_labeled, x_unlabeled, model, cfg, noise)
    dtype = next(model.parameters()).dtype
    total = torch.zeros((), dtype=dtype)
    lab = unl = None
    if has_l:
        lab = labeled_bound(x_labeled, y_labeled, model, cfg, noise.labeled_z)
        total = total + lab.total.sum() + cfg.alpha * lab.class_log_prob.sum()
    if has_u:
        if estimator == "relaxed":
            unl = unlabeled_bound_relaxed(x_unlabeled, model, cfg, noise.unlabeled_y, noise.unlabeled_z)
        elif estimator == "exact":
            unl = unlabeled_bound_exact(x_unlabeled, model, cfg, noise.unlabeled_z)
        else:
            raise ValueError(f"unknown unlabeled estimator {estimator!r}")
        total = total + unl.total.sum()
    return ObjectiveValue(total, lab, unl, cfg.alpha)


def _combined_relaxed_fused(x_l, y_l, x_u, model, cfg: ObjectiveConfig, noise: ObjectiveNoise) -> ObjectiveValue:
    """One encoder/decoder pass over labeled and unlabeled records together.

    Equal to the sum of the separate labeled and relaxed unlabeled bounds.
    """
    n_l = x_l.shape[0]
    x = torch.cat([x_l, x_u])
    h1 = model.features(x)
    qy = model.classify(h1)
    y_soft = gumbel_softmax_sample(qy.logits[n_l:], cfg.tau, noise.unlabeled_y).values
    e = torch.cat([model.embed_label(y_l), model.embed_label(y_soft)])
    q = model.encoder.from_features(h1, e)
    z = gaussian_rsample(q, torch.cat([noise.labeled_z, noise.unlabeled_z]))
    recon = reconstruction_from_logits(x, model.decode_logits(z, e), cfg.likelihood)
    kl = kl_to_standard_normal(q)
    log_prior = torch.full_like(recon, cfg.log_prior)

    clp = categorical_log_prob(ClassPosterior(qy.logits[:n_l]), y_l)
    ent = categorical_entropy(ClassPosterior(qy.logits[n_l:]))
    l_total = recon[:n_l] + log_prior[:n_l] - cfg.beta * kl[:n_l]
    u_total = recon[n_l:] + log_prior[n_l:] - cfg.beta * kl[n_l:] + cfg.gamma * ent
    lab = BoundValue(l_total, recon[:n_l], kl[:n_l], log_prior[:n_l], torch.zeros_like(l_total), clp)
    unl = BoundValue(u_total, recon[n_l:], kl[n_l:], log_prior[n_l:], ent)
    total = l_total.sum() + cfg.alpha * clp.sum() + u_total.sum()
    return ObjectiveValue(total, lab, unl, cfg.alpha)


def recombine(terms: dict[str, float], alpha: float, beta: float, gamma: float) -> float:
    return (
        terms["reconstruction"]
        + terms["log_prior"]
        - beta * terms["kl"]
        + gamma * terms["entropy"]
        + alpha * terms["class_log_prob"]
    )


def alpha_from_dims(shape) -> float:
    d = 1
    for n in shape:
        if int(n) <= 0:
            raise ValueError(f"dimensions must be positive, got {tuple(shape)}")
        d *= int(n)
    return 1e-5 * d


def with_schedule(cfg: ObjectiveConfig, beta: float, tau: float) -> ObjectiveConfig:
    return replace(cfg, beta=beta, tau=tau)
