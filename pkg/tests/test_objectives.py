import math

import numpy as np
import pytest
import torch

from conftest import random_one_hot, tiny_config
from ssvae.distributions import standard_normal_log_prob
from ssvae.networks import SemiSupervisedVAE
from ssvae.objectives import (
    ObjectiveConfig,
    ObjectiveNoise,
    alpha_from_dims,
    combined_objective,
    labeled_bound,
    reconstruction_from_logits,
    reconstruction_log_likelihood,
    recombine,
    unlabeled_bound_exact,
    unlabeled_bound_relaxed,
)


def noise_for(model, n_l, n_u, seed=0):
    g = torch.Generator().manual_seed(seed)
    h = torch.Generator().manual_seed(seed + 1)
    return ObjectiveNoise.sample(n_l, n_u, model.cfg.latent_size, 3, g, h, torch.float64)


def test_reconstruction_worked_example():
    x = torch.zeros(4, 73, 94, 64, dtype=torch.float64)
    x[0] = 1.0
    p = torch.full_like(x, 0.5)
    ll = reconstruction_log_likelihood(x, p).item()
    assert ll == pytest.approx(-4 * 439168 * math.log(2), rel=1e-12)
    assert ll == pytest.approx(-1_217_632.2440, abs=1e-3)


def test_reconstruction_perfect_and_clamped():
    x = random_one_hot(1)[0]
    assert reconstruction_log_likelihood(x, x).item() == pytest.approx(x.numel() * math.log1p(-1e-7), rel=1e-6)
    assert math.isfinite(reconstruction_log_likelihood(x, 1 - x).item())
    with pytest.raises(ValueError, match="shape mismatch"):
        reconstruction_log_likelihood(x, x[:, :4])


def test_logit_form_matches_probability_form():
    g = torch.Generator().manual_seed(0)
    x = random_one_hot(3)
    logits = torch.randn(x.shape, generator=g, dtype=torch.float64) * 3
    a = reconstruction_from_logits(x, logits)
    b = reconstruction_log_likelihood(x, torch.sigmoid(logits))
    torch.testing.assert_close(a, b, rtol=1e-9, atol=1e-6)


def test_categorical_likelihood_option():
    x = random_one_hot(2)
    logits = torch.zeros_like(x)
    ll = reconstruction_from_logits(x, logits, "categorical")
    torch.testing.assert_close(ll, torch.full((2,), -512 * math.log(4), dtype=torch.float64))
    with pytest.raises(ValueError):
        reconstruction_from_logits(x, logits, "gaussian")


def test_alpha_from_dims():
    assert alpha_from_dims((146, 188, 128)) == pytest.approx(35.13344)
    assert alpha_from_dims((73, 94, 64)) == pytest.approx(4.39168)
    with pytest.raises(ValueError):
        alpha_from_dims((0, 3, 3))


@pytest.mark.parametrize(
    "kw", [dict(alpha=-1), dict(beta=-0.1), dict(gamma=0.5), dict(tau=0.0), dict(likelihood="x")]
)
def test_objective_config_validation(kw):
    with pytest.raises(ValueError):
        ObjectiveConfig(**kw)


def test_gamma_one_recovers_plain_bound(tiny_model):
    x = random_one_hot(4)
    nz = noise_for(tiny_model, 0, 4)
    for est in ("relaxed", "exact"):
        b1 = (
            unlabeled_bound_relaxed(x, tiny_model, ObjectiveConfig(gamma=1.0), nz.unlabeled_y, nz.unlabeled_z)
            if est == "relaxed"
            else unlabeled_bound_exact(x, tiny_model, ObjectiveConfig(gamma=1.0), nz.unlabeled_z)
        )
        b50 = (
            unlabeled_bound_relaxed(x, tiny_model, ObjectiveConfig(gamma=50.0), nz.unlabeled_y, nz.unlabeled_z)
            if est == "relaxed"
            else unlabeled_bound_exact(x, tiny_model, ObjectiveConfig(gamma=50.0), nz.unlabeled_z)
        )
        plain = b1.reconstruction + b1.log_prior - b1.kl + b1.entropy
        torch.testing.assert_close(b1.total, plain)
        torch.testing.assert_close(b50.total - b1.total, 49 * b1.entropy)


def test_beta_and_alpha_zero_remove_terms(tiny_model):
    x = random_one_hot(3)
    y = torch.tensor([0, 1, 2])
    nz = noise_for(tiny_model, 3, 0)
    b = labeled_bound(x, y, tiny_model, ObjectiveConfig(beta=0.0), nz.labeled_z)
    torch.testing.assert_close(b.total, b.reconstruction + b.log_prior)
    v = combined_objective(x, y, None, tiny_model, ObjectiveConfig(alpha=0.0), nz)
    torch.testing.assert_close(v.total, v.labeled.total.sum())


def test_empty_batches_rejected(tiny_model):
    nz = noise_for(tiny_model, 0, 0)
    empty = torch.zeros(0, 4, 8, 8, 8, dtype=torch.float64)
    with pytest.raises(ValueError, match="at least one"):
        combined_objective(empty, torch.zeros(0, dtype=torch.long), empty, tiny_model, ObjectiveConfig(), nz)


def test_labeled_only_and_unlabeled_only(tiny_model):
    x = random_one_hot(3)
    y = torch.tensor([2, 0, 1])
    nz = noise_for(tiny_model, 3, 3)
    cfg = ObjectiveConfig(alpha=2.0)
    v_l = combined_objective(x, y, None, tiny_model, cfg, nz)
    assert v_l.unlabeled is None
    torch.testing.assert_close(v_l.total, v_l.labeled.total.sum() + 2.0 * v_l.labeled.class_log_prob.sum())
    v_u = combined_objective(None, None, x, tiny_model, cfg, nz)
    assert v_u.labeled is None
    torch.testing.assert_close(v_u.total, v_u.unlabeled.total.sum())


def test_fused_pass_equals_separate_bounds(tiny_model):
    x_l = random_one_hot(3, seed=1)
    y = torch.tensor([0, 2, 1])
    x_u = random_one_hot(5, seed=2)
    cfg = ObjectiveConfig(alpha=3.0, beta=2.0, gamma=5.0, tau=0.5)
    nz = noise_for(tiny_model, 3, 5)
    fused = combined_objective(x_l, y, x_u, tiny_model, cfg, nz)
    lab = labeled_bound(x_l, y, tiny_model, cfg, nz.labeled_z)
    unl = unlabeled_bound_relaxed(x_u, tiny_model, cfg, nz.unlabeled_y, nz.unlabeled_z)
    sep = lab.total.sum() + 3.0 * lab.class_log_prob.sum() + unl.total.sum()
    torch.testing.assert_close(fused.total, sep, rtol=1e-10, atol=1e-8)


def test_terms_recombine_to_total(tiny_model):
    cfg = ObjectiveConfig(alpha=3.0, beta=2.0, gamma=5.0, tau=0.5)
    nz = noise_for(tiny_model, 2, 3)
    for est in ("relaxed", "exact"):
        v = combined_objective(random_one_hot(2), torch.tensor([0, 1]), random_one_hot(3, seed=5), tiny_model, cfg, nz, est)
        t = v.terms()
        assert recombine(t, 3.0, 2.0, 5.0) == pytest.approx(t["total"], rel=1e-10)


def test_unknown_estimator(tiny_model):
    nz = noise_for(tiny_model, 0, 1)
    with pytest.raises(ValueError, match="estimator"):
        combined_objective(None, None, random_one_hot(1), tiny_model, ObjectiveConfig(), nz, "magic")


def test_gradient_matches_central_differences():
    torch.manual_seed(3)
    model = SemiSupervisedVAE(tiny_config()).double()
    x_l, x_u = random_one_hot(2, seed=7), random_one_hot(2, seed=8)
    y = torch.tensor([1, 2])
    cfg = ObjectiveConfig(alpha=5.0, beta=0.7, gamma=3.0, tau=0.6)
    nz = noise_for(model, 2, 2, seed=4)

    def f():
        return combined_objective(x_l, y, x_u, model, cfg, nz).total

    model.zero_grad()
    f().backward()
    rng = np.random.default_rng(0)
    params = list(model.named_parameters())
    checked = 0
    for idx in rng.choice(len(params), size=8, replace=False):
        name, p = params[idx]
        flat = p.data.view(-1)
        j = int(rng.integers(flat.numel()))
        analytic = p.grad.view(-1)[j].item()
        h = 1e-6
        with torch.no_grad():
            old = flat[j].item()
            flat[j] = old + h
            up = f().item()
            flat[j] = old - h
            down = f().item()
            flat[j] = old
        numeric = (up - down) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-4 * max(1.0, abs(numeric))), name
        checked += 1
    assert checked == 8


def _iwae_labeled(model, x, y, k, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        e = model.embed_label(y).expand(k, -1)
        q, _ = model.encode(x.expand(k, *x.shape[1:]), e)
        z = q.mean + torch.exp(0.5 * q.log_variance) * torch.randn(k, q.mean.shape[-1], generator=g, dtype=x.dtype)
        rec = reconstruction_from_logits(x.expand(k, *x.shape[1:]), model.decode_logits(z, e))
        w = rec + standard_normal_log_prob(z) - q.log_prob(z)
        return math.log(1 / 3) + (torch.logsumexp(w, 0) - math.log(k)).item()


def test_labeled_bound_is_below_log_likelihood(tiny_model):
    # the single-sample bound averaged over many draws sits below a K-sample
    # importance estimate of log p(x, y) (itself a lower bound that tightens with K)
    x = random_one_hot(1, seed=11)
    y = torch.tensor([1])
    k = 4000
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        b = labeled_bound(
            x.expand(k, *x.shape[1:]), y.expand(k), tiny_model, ObjectiveConfig(),
            torch.randn(k, 2, generator=g, dtype=torch.float64),
        )
    elbo = b.total.mean().item()
    assert elbo <= _iwae_labeled(tiny_model, x, y, k, seed=1) + 1e-6


def test_exact_unlabeled_bound_is_below_log_marginal(tiny_model):
    x = random_one_hot(1, seed=12)
    k = 3000
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        b = unlabeled_bound_exact(
            x.expand(k, *x.shape[1:]), tiny_model, ObjectiveConfig(gamma=1.0),
            torch.randn(k, 2, generator=g, dtype=torch.float64),
        )
    per_class = [_iwae_labeled(tiny_model, x, torch.tensor([c]), k, seed=10 + c) for c in range(3)]
    log_px = float(torch.logsumexp(torch.tensor(per_class), 0))
    assert b.total.mean().item() <= log_px + 1e-6


def test_relaxed_approaches_exact_at_low_temperature(tiny_model):
    x = random_one_hot(1, seed=13)
    k = 4000
    g = torch.Generator().manual_seed(5)
    z = torch.randn(k, 2, generator=g, dtype=torch.float64)
    u = torch.rand(k, 3, generator=g, dtype=torch.float64)
    xs = x.expand(k, *x.shape[1:])
    with torch.no_grad():
        relaxed = unlabeled_bound_relaxed(xs, tiny_model, ObjectiveConfig(tau=0.02), u, z).total
        exact = unlabeled_bound_exact(xs, tiny_model, ObjectiveConfig(), z).total
    se = relaxed.std().item() / math.sqrt(k)
    assert relaxed.mean().item() == pytest.approx(exact.mean().item(), abs=4 * se + 1e-3 * abs(exact.mean().item()))
