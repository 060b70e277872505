import numpy as np
import pytest
import torch

from ssvae.networks import ModelConfig, SemiSupervisedVAE


def tiny_config(**overrides) -> ModelConfig:
    """4x8x8x8 input, every width <= 8."""
    base = dict(
        input_shape=(8, 8, 8),
        latent_size=2,
        embedding_size=4,
        encoder_widths=(4, 8, 8),
        classifier_widths=(8, 8),
        classifier_hidden=8,
        decoder_widths=(8, 8, 4),
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_one_hot(n, shape=(8, 8, 8), channels=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, channels, (n, *shape), generator=g)
    return torch.nn.functional.one_hot(labels, channels).permute(0, 4, 1, 2, 3).to(dtype)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return SemiSupervisedVAE(tiny_cfg).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = __import__("pathlib").Path(__file__).with_name("tiny_config.json")


def tiny_experiment(**train_overrides):
    """Preprocess/model/train configs for 16^3 synthetic volumes (8^3 after preprocessing)."""
    from ssvae.cli import build_experiment, load_config
    from ssvae.training import TrainConfig

    exp = build_experiment(load_config(str(TINY_CONFIG)))
    if train_overrides:
        exp.train = TrainConfig.from_dict({**exp.train.to_dict(), **train_overrides})
    return exp


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from ssvae.synthdata import SynthSpec, generate_dataset

    exp = tiny_experiment()
    spec = SynthSpec.from_dict(exp.synth["spec"])
    return generate_dataset(spec, 16, 8, tmp_path_factory.mktemp("tiny_data"), seed=1)


# --- acceptance summary ------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance(n, title)`` are collected into one
# PASS/FAIL line per criterion at the end of the run. ``record_property("detail", ...)``
# inside such a test adds the measured numbers to the line.

_acceptance: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        entry = _acceptance.setdefault(number, {"title": title, "tests": []})
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        entry["tests"].append((item.name, rep.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_acceptance, key=lambda n: (int(str(n).rstrip("ab")), str(n))):
        entry = _acceptance[number]
        ok = all(o == "passed" for _, o, _ in entry["tests"])
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {entry['title']}")
        for name, outcome, details in entry["tests"]:
            for d in details:
                tr.write_line(f"         {d}")
            if outcome != "passed":
                tr.write_line(f"         {name}: {outcome}")
