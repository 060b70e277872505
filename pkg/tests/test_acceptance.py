"""Acceptance criteria 1-10.

Each test carries ``@pytest.mark.acceptance(n, title)``; the conftest hook
prints one PASS/FAIL line per criterion at the end of the run, with the
measured numbers recorded through ``record_property("detail", ...)``.

The desk-scale regime runs (criteria 8 and 9) train nine small models and
dominate the runtime, roughly 25 minutes on one CPU core.
"""

import hashlib
import math
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import TINY_CONFIG, tiny_config, tiny_experiment
from ssvae.cli import build_experiment, builtin_config, main
from ssvae.distributions import (
    ClassPosterior,
    GaussianPosterior,
    categorical_entropy,
    gaussian_rsample,
    kl_to_standard_normal,
    standard_normal_log_prob,
)
from ssvae.evaluation import FoldModel, binomial_ci_halfwidth, evaluate_fold
from ssvae.networks import SemiSupervisedVAE, parameter_checksum, sample_by_class
from ssvae.objectives import (
    ObjectiveConfig,
    ObjectiveNoise,
    alpha_from_dims,
    combined_objective,
    labeled_bound,
    reconstruction_from_logits,
    unlabeled_bound_exact,
    unlabeled_bound_relaxed,
)
from ssvae.regimes import RegimeSpec, run_regime
from ssvae.synthdata import SynthSpec, generate_dataset, read_answers, roughness, with_answers
from ssvae.training import TrainConfig, beta_schedule, load_volumes, smoothed, tau_schedule, to_one_hot, train
from ssvae.volumes import PreprocessConfig, SegVolume, preprocess, record_class

acceptance = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """8 labeled tiny subjects overfit by the miniature model (L_z = 2) in 64-bit."""
    exp = tiny_experiment(total_steps=2000, beta_steps=500, tau_steps=1500, dtype="float64")
    model_cfg = replace(exp.model, dropout=0.0)
    ds = generate_dataset(SynthSpec.from_dict(exp.synth["spec"]), 8, 0, tmp_path_factory.mktemp("mini"), seed=21)
    state = train(ds.manifest, model_cfg, exp.train, exp.preprocess)
    x = to_one_hot(load_volumes(ds.manifest, exp.preprocess)).double()
    y = torch.tensor([record_class(r) for r in ds.manifest])
    return state, x, y


def _desk():
    return build_experiment(builtin_config(desk=True))


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    spec = SynthSpec()
    regime = generate_dataset(spec, 30, 500, root / "regime", seed=11)
    test = generate_dataset(spec, 0, 300, root / "test", seed=12, prefix="test")
    full = generate_dataset(spec, 300, 0, root / "full", seed=13, prefix="full")
    test_m = with_answers(test.manifest, read_answers(test.answers_path))
    return regime.manifest, test_m, full.manifest


@pytest.fixture(scope="module")
def regime_runs(desk_data, tmp_path_factory):
    regime, test, _ = desk_data
    exp = _desk()
    spec = RegimeSpec.s0(regime.labeled, regime.unlabeled, seed=3)
    root = tmp_path_factory.mktemp("regime_runs")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        semi = run_regime(spec, exp.model, exp.train, exp.preprocess, root / "semi", holdout=test)
        sup = run_regime(spec, exp.model, exp.train, exp.preprocess, root / "sup", holdout=test, supervised_only=True)
    return semi, sup


# ---------------------------------------------------------------------------
# 1-2: formula reproduction
# ---------------------------------------------------------------------------


@acceptance(1, "binomial CI half-widths for (0.4218, n=53) and (0.392, n=159)")
def test_binomial_ci_reproduction(record_property):
    a = binomial_ci_halfwidth(0.4218, 53)
    b = binomial_ci_halfwidth(0.392, 159)
    record_property("detail", f"(0.4218, 53) -> {a:.4f}; (0.392, 159) -> {b:.4f}")
    assert a == pytest.approx(0.1330, abs=5e-4)
    assert b == pytest.approx(0.0759, abs=5e-4)


@acceptance(2, "hyperparameter arithmetic")
def test_hyperparameter_arithmetic(record_property):
    assert alpha_from_dims((73, 94, 64)) == pytest.approx(4.39168, abs=1e-12)
    v = SegVolume(np.zeros((240, 240, 155), dtype=np.uint8))
    assert preprocess(v, PreprocessConfig()).data.shape == (4, 73, 94, 64)
    cfg = TrainConfig()
    assert beta_schedule(0, cfg) == 0.0
    assert beta_schedule(30_000, cfg) == 6000.0 and beta_schedule(45_000, cfg) == 6000.0
    assert tau_schedule(0, cfg) == 1.0
    assert tau_schedule(50_000, cfg) == pytest.approx(0.2, abs=1e-12)
    assert tau_schedule(70_000, cfg) == pytest.approx(0.2, abs=1e-12)
    record_property("detail", f"alpha={alpha_from_dims((73, 94, 64)):.5f}; (240,240,155) -> (4,73,94,64); beta 0->6000; tau 1.0->0.2")


# ---------------------------------------------------------------------------
# 3-6: oracles on distributions and the objective
# ---------------------------------------------------------------------------


@acceptance(3, "distribution oracles (KL vs 1e6-sample MC, entropy vs direct sum)")
def test_distribution_oracles(record_property):
    rng = np.random.default_rng(2024)
    g = torch.Generator().manual_seed(2024)
    worst = 0.0
    for _ in range(20):
        mu = torch.tensor(rng.uniform(-2, 2, size=2))
        lv = torch.tensor(rng.uniform(-2, 1.5, size=2))
        q = GaussianPosterior(mu, lv)
        mc = 0.0
        for _ in range(4):
            z = gaussian_rsample(q, torch.randn(250_000, 2, generator=g, dtype=torch.float64))
            mc += (q.log_prob(z) - standard_normal_log_prob(z)).mean().item() / 4
        worst = max(worst, abs(kl_to_standard_normal(q).item() - mc))
    ent_worst = 0.0
    for _ in range(100):
        p = rng.dirichlet(np.ones(3) * rng.uniform(0.1, 3))
        direct = -sum(pi * math.log(pi) for pi in p if pi > 0)
        ent_worst = max(ent_worst, abs(categorical_entropy(torch.tensor(p)).item() - direct))
        logits = torch.tensor(np.log(p))
        ent_worst = max(ent_worst, abs(categorical_entropy(ClassPosterior(logits)).item() - direct))
    record_property("detail", f"max |KL - MC| over 20 draws = {worst:.2e} (tol 1e-2); max entropy error = {ent_worst:.1e} (tol 1e-12)")
    assert worst < 1e-2
    assert ent_worst < 1e-12


@acceptance(4, "relaxed vs exact unlabeled bound at tau = 0.2 (1e4 draws, 2%)")
def test_estimator_consistency(mini_run, record_property):
    state, x, _ = mini_run
    torch.manual_seed(0)
    fresh = SemiSupervisedVAE(replace(tiny_config(), dropout=0.0)).double().eval()
    g = torch.Generator().manual_seed(4)
    n = 10_000

    def deviations(model, tau):
        out = []
        with torch.no_grad():
            for i in range(3):
                xs = x[i : i + 1].expand(n, *x.shape[1:])
                z = torch.randn(n, 2, generator=g, dtype=torch.float64)
                u = torch.rand(n, 3, generator=g, dtype=torch.float64)
                r = unlabeled_bound_relaxed(xs, model, ObjectiveConfig(tau=tau), u, z).total.mean().item()
                e = unlabeled_bound_exact(xs, model, ObjectiveConfig(), z).total.mean().item()
                out.append(abs(r - e) / abs(e))
        return out

    dev = deviations(fresh, 0.2)
    trained = deviations(state.model.eval(), 0.2)
    record_property(
        "detail",
        "miniature model: max rel. deviation " + f"{max(dev):.2e} (tol 2e-2); "
        + "for information, overfit model: " + ", ".join(f"{d:.3f}" for d in trained),
    )
    assert max(dev) < 0.02


def _fd_probe(model, f, rng, count):
    model.zero_grad()
    f().backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params], dtype=float)
    failures, worst = [], 0.0
    for _ in range(count):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[k]
        j = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[j].item()
        flat = p.data.view(-1)
        h = 1e-5
        with torch.no_grad():
            old = flat[j].item()
            flat[j] = old + h
            up = f().item()
            flat[j] = old - h
            down = f().item()
            flat[j] = old
        numeric = (up - down) / (2 * h)
        err = abs(analytic - numeric)
        # relative tolerance with an absolute floor for gradients that are numerically zero
        scale = max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, err / scale)
        if err > 1e-3 * scale:
            failures.append((k, j, analytic, numeric))
    return failures, worst


@acceptance(5, "finite-difference gradients on the combined objective (100 probes, rel 1e-3)")
def test_gradient_correctness(record_property):
    torch.manual_seed(5)
    model = SemiSupervisedVAE(tiny_config(dropout=0.0)).double().eval()
    cfg = ObjectiveConfig(alpha=3.0, beta=0.5, gamma=4.0, tau=0.4)
    x = to_one_hot(np.random.default_rng(0).integers(0, 4, size=(3, 8, 8, 8))).double()
    y = torch.tensor([0, 1, 2])
    g, h = torch.Generator().manual_seed(1), torch.Generator().manual_seed(2)
    noise = ObjectiveNoise.sample(3, 3, 2, 3, g, h, torch.float64)
    rng = np.random.default_rng(55)
    lab_fail, lab_worst = _fd_probe(model, lambda: combined_objective(x, y, None, model, cfg, noise).total, rng, 100)
    unl_fail, unl_worst = _fd_probe(model, lambda: combined_objective(None, None, x, model, cfg, noise).total, rng, 100)
    record_property(
        "detail",
        f"labeled-only: {100 - len(lab_fail)}/100 within tol (worst rel {lab_worst:.1e}); "
        f"unlabeled-only: {100 - len(unl_fail)}/100 (worst rel {unl_worst:.1e})",
    )
    assert not lab_fail and not unl_fail


@acceptance(6, "importance-sampled log p(x,y) >= mean labeled bound - 3 SE (L_z = 2, beta = gamma = 1)")
def test_lower_bound_property(mini_run, record_property):
    state, x, y = mini_run
    model = state.model.eval()
    light = SemiSupervisedVAE(model.cfg).float().eval()
    light.load_state_dict({k: v.float() for k, v in model.state_dict().items()})
    idx = list(range(5))
    k_prior, chunk = 1_000_000, 20_000
    g = torch.Generator().manual_seed(6)
    log_w = {i: [] for i in idx}
    with torch.no_grad():
        # prior samples are shared by inputs with the same label; each input sees 1e6 of them
        for c in sorted({int(y[i]) for i in idx}):
            members = [i for i in idx if int(y[i]) == c]
            for _ in range(k_prior // chunk):
                z = torch.randn(chunk, 2, generator=g)
                logits = light.decode_logits(z, light.embed_label(torch.full((chunk,), c)))
                for i in members:
                    xi = x[i].float().expand(chunk, *x.shape[1:])
                    log_w[i].append(reconstruction_from_logits(xi, logits).double())
        rows, ok = [], True
        for i in idx:
            w = torch.cat(log_w[i])
            log_pxy = math.log(1 / 3) + (torch.logsumexp(w, 0) - math.log(k_prior)).item()
            n = 10_000
            noise = torch.randn(n, 2, generator=g, dtype=torch.float64)
            b = labeled_bound(x[i : i + 1].expand(n, *x.shape[1:]), y[i : i + 1].expand(n), model,
                              ObjectiveConfig(beta=1.0, gamma=1.0), noise).total  # fmt: skip
            mean, se = b.mean().item(), b.std().item() / math.sqrt(n)
            rows.append(f"{log_pxy:.2f} vs {mean:.2f}±{se:.3f}")
            ok &= log_pxy >= mean - 3 * se
    record_property("detail", "log p(x,y) vs bound: " + "; ".join(rows))
    assert ok


# ---------------------------------------------------------------------------
# 7: overfit
# ---------------------------------------------------------------------------


@acceptance(7, "overfit smoke test (8 subjects, 2000 steps)")
def test_overfit(mini_run, record_property):
    state, x, y = mini_run
    model = state.model.eval()
    with torch.no_grad():
        e = model.embed_label(y)
        q, h1 = model.encode(x, e)
        p = model.decode(q.mean, e)
        true_prob = (p * x).sum(1).mean().item()
        acc = int((model.classify(h1).logits.argmax(-1) == y).sum())
    recon = smoothed([r["reconstruction"] for r in state.metrics], 100)
    monotone = bool(np.all(np.diff(recon) > 0))
    record_property("detail", f"true-channel probability {true_prob:.4f} (> 0.9); classifier {acc}/8; "
                              f"100-step smoothed reconstruction monotone: {monotone}")  # fmt: skip
    assert true_prob > 0.9
    assert acc == 8
    assert monotone


# ---------------------------------------------------------------------------
# 8-9: desk regime
# ---------------------------------------------------------------------------


@acceptance("8a", "supervised training with 300 labels reaches >= 90% held-out accuracy")
def test_full_label_upper_bound(desk_data, tmp_path, record_property):
    _, test, full = desk_data
    exp = _desk()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = train(full, exp.model, exp.train, exp.preprocess, tmp_path)
    row, _, _ = evaluate_fold(FoldModel(1, state.model, exp.preprocess, state.class_stats), test)
    record_property("detail", f"held-out accuracy {row['accuracy']:.4f} ± {row['ci_halfwidth']:.4f} (n={row['n']})")
    assert row["accuracy"] >= 0.90


@acceptance("8b", "S0 semi-supervised (30 + 500) vs 30-label supervised ablation, same splits and seeds")
def test_semi_supervised_non_inferiority(regime_runs, record_property):
    semi, sup = regime_runs
    assert [f.split for f in semi.folds] == [f.split for f in sup.folds]
    a_semi, a_sup = semi.report["average"], sup.report["average"]
    delta = a_semi["accuracy"] - a_sup["accuracy"]
    margin = a_semi["ci_halfwidth"]
    folds = ", ".join(f"{r['accuracy']:.3f}/{s['accuracy']:.3f}" for r, s in zip(semi.report["folds"], sup.report["folds"]))
    record_property("detail", f"pooled validation accuracy: semi {a_semi['accuracy']:.4f} ± {margin:.4f}, "
                              f"supervised {a_sup['accuracy']:.4f} ± {a_sup['ci_halfwidth']:.4f} (n={a_semi['n']}); "
                              f"delta {delta:+.4f}")  # fmt: skip
    record_property("detail", f"per fold semi/supervised: {folds}")
    record_property("detail", f"majority vote on 300 held-out subjects: semi {semi.report['majority_vote']['accuracy']:.4f}, "
                              f"supervised {sup.report['majority_vote']['accuracy']:.4f}")  # fmt: skip
    assert delta >= -margin


@acceptance(9, "generated samples: mean roughness(short) > mean roughness(long), shared z")
def test_conditional_generation(regime_runs, record_property):
    semi, _ = regime_runs
    model = semi.fold_models[0].model
    _, labels = sample_by_class(model, 20, seed=9)
    means, empty = {}, {}
    for c in (0, 2):
        vals = []
        for i in range(20):
            try:
                vals.append(roughness(labels[c, i].numpy()))
            except ValueError:
                pass
        empty[c] = 20 - len(vals)
        means[c] = float(np.mean(vals)) if vals else float("nan")
    record_property("detail", f"mean roughness short {means[0]:.4f} vs long {means[2]:.4f} "
                              f"(empty masks: short {empty[0]}, long {empty[2]})")  # fmt: skip
    assert empty[0] < 20 and empty[2] < 20
    assert means[0] > means[2]


# ---------------------------------------------------------------------------
# 10: determinism
# ---------------------------------------------------------------------------


def _digest(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _run_all(root: Path) -> None:
    cfg = str(TINY_CONFIG)
    data = str(root / "data" / "manifest.csv")
    cmds = [
        ["synth", "--config", cfg, "--out", str(root / "data"), "--seed", "7"],
        ["splits", "--config", cfg, "--manifest", data, "--out", str(root / "splits"), "--seed", "7"],
        ["train", "--config", cfg, "--manifest", data, "--out", str(root / "run"), "--seed", "7"],
        ["train", "--config", cfg, "--manifest", data, "--out", str(root / "cv"), "--folds", "3", "--steps", "5", "--seed", "7"],
        ["eval", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--manifest", str(root / "splits" / "fold_1" / "validation.csv"),
         "--out", str(root / "eval")],
        ["predict", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--manifest", data, "--out", str(root / "pred.csv")],
        ["generate", "--checkpoint", str(root / "run" / "checkpoint.pt"), "--out", str(root / "gen"), "--samples", "3", "--seed", "7"],
    ]  # fmt: skip
    for c in cmds:
        assert main(c) == 0, c


@acceptance(10, "every CLI subcommand is byte-identical on rerun")
def test_cli_determinism(tmp_path, record_property, capsys):
    _run_all(tmp_path / "a")
    _run_all(tmp_path / "b")
    capsys.readouterr()
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert set(da) == set(db)
    differing = [k for k in da if da[k] != db[k]]
    from ssvae.training import load_model

    ca = parameter_checksum(load_model(tmp_path / "a" / "run" / "checkpoint.pt")[0])
    cb = parameter_checksum(load_model(tmp_path / "b" / "run" / "checkpoint.pt")[0])
    kinds = sorted({Path(k).suffix for k in da})
    record_property("detail", f"{len(da)} files compared ({', '.join(kinds)}); differing: {len(differing)}; "
                              f"parameter checksum {ca[:12]} == {cb[:12]}")  # fmt: skip
    assert not differing, differing[:5]
    assert ca == cb
