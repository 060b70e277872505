"""Stochastic-gradient maximization of the semi-supervised objective.

Randomness comes from independent substreams of one seed: data order,
Gaussian noise, Gumbel noise, dropout and parameter initialization. Every
stream's state goes into the checkpoint, so a resumed run continues the
same trajectory bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from ssvae.evaluation import ClassStats
from ssvae.networks import ModelConfig, SemiSupervisedVAE
from ssvae.objectives import ObjectiveConfig, ObjectiveNoise, alpha_from_dims, combined_objective, recombine
from ssvae.volumes import DatasetManifest, PreprocessConfig, load_record, preprocess_labels, record_class

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssvae-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = (
    "step", "total", "reconstruction", "kl", "entropy", "class_log_prob",
    "beta", "tau", "log_prior", "alpha", "gamma",
)  # fmt: skip


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"non-finite objective at step {step}; diagnostic checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-5
    total_steps: int = 60_000
    beta_end: float = 6e3
    beta_steps: int = 30_000
    tau_start: float = 1.0
    tau_end: float = 0.2
    tau_steps: int = 50_000
    gamma: float = 50.0
    # None -> 1e-5 * number of voxels
    alpha: float | None = None
    likelihood: str = "bernoulli"
    unlabeled_estimator: str = "relaxed"
    min_labeled_per_batch: int = 4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    dtype: str = "float32"
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        for name in ("batch_size", "total_steps", "beta_steps", "tau_steps"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("need 0 < tau_end <= tau_start")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.beta_end < 0:
            raise ValueError("beta_end must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.unlabeled_estimator not in ("relaxed", "exact"):
            raise ValueError("unlabeled_estimator must be 'relaxed' or 'exact'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**dict(d))


def beta_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear KL warm-up from 0 to ``beta_end`` over ``beta_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(step / cfg.beta_steps, 1.0) * cfg.beta_end


def tau_schedule(step: int, cfg: TrainConfig) -> float:
    """Exponential temperature decay from ``tau_start`` to ``tau_end``, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step / cfg.tau_steps, 1.0)
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("SSVAE_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_volumes(manifest: DatasetManifest, cfg: PreprocessConfig) -> np.ndarray:
    """Preprocessed label maps for every record, stacked as uint8 ``(N, d1, d2, d3)`` in manifest order."""
    if len(manifest) == 0:
        return np.zeros((0, *cfg.target_shape), dtype=np.uint8)
    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        vols = list(pool.map(lambda r: preprocess_labels(load_record(r), cfg).data, manifest.records))
    return np.stack(vols)


def to_one_hot(labels: np.ndarray, channels: int = 4) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(labels)).long()
    return F.one_hot(t, channels).permute(0, 4, 1, 2, 3).float()


class RecordStream:
    """Endless shuffled pass over ``n`` items; reshuffles after each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n) if n else np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos : self.pos + m].tolist())
            self.pos += m
        return np.asarray(out, dtype=np.int64)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def restore(self, s: Mapping) -> None:
        self.rng.bit_generator.state = s["rng"]
        self.perm = np.asarray(s["perm"], dtype=np.int64)
        self.pos = int(s["pos"])


def batch_composition(batch_size: int, n_labeled: int, n_unlabeled: int, min_labeled: int = 4) -> tuple[int, int]:
    """Labeled/unlabeled counts per batch, proportional to the pool sizes."""
    if n_labeled == 0:
        raise ValueError("training needs at least one labeled record")
    if n_unlabeled == 0:
        return batch_size, 0
    k = int(round(batch_size * n_labeled / (n_labeled + n_unlabeled)))
    k = min(batch_size, max(k, min_labeled))
    return k, batch_size - k


# ---------------------------------------------------------------------------
# state and checkpoints
# ---------------------------------------------------------------------------


def _substreams(seed: int) -> dict[str, int]:
    names = ("data_labeled", "data_unlabeled", "gaussian", "gumbel", "dropout", "init")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: int(c.generate_state(1, dtype=np.uint64)[0] >> 1) for n, c in zip(names, children)}


@dataclass
class TrainState:
    model: SemiSupervisedVAE
    optimizer: torch.optim.Optimizer
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    preprocess_cfg: PreprocessConfig
    step: int = 0
    gaussian: torch.Generator = field(default_factory=torch.Generator)
    gumbel: torch.Generator = field(default_factory=torch.Generator)
    dropout_state: torch.Tensor | None = None
    labeled_stream: RecordStream | None = None
    unlabeled_stream: RecordStream | None = None
    class_stats: ClassStats | None = None
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def objective_config(self) -> ObjectiveConfig:
        cfg = self.train_cfg
        alpha = alpha_from_dims(self.model_cfg.input_shape) if cfg.alpha is None else cfg.alpha
        return ObjectiveConfig(
            alpha=alpha,
            beta=beta_schedule(self.step, cfg),
            gamma=cfg.gamma,
            tau=tau_schedule(self.step, cfg),
            class_count=self.model_cfg.class_count,
            likelihood=cfg.likelihood,
        )


def new_state(
    model_cfg: ModelConfig, train_cfg: TrainConfig, preprocess_cfg: PreprocessConfig, n_labeled: int, n_unlabeled: int
) -> TrainState:
    seeds = _substreams(train_cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["init"])
        model = SemiSupervisedVAE(model_cfg).to(train_cfg.torch_dtype)
        torch.manual_seed(seeds["dropout"])
        dropout_state = torch.get_rng_state()
    opt = torch.optim.Adam(
        model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.adam_betas, eps=train_cfg.adam_eps
    )
    state = TrainState(model, opt, model_cfg, train_cfg, preprocess_cfg)
    state.gaussian.manual_seed(seeds["gaussian"])
    state.gumbel.manual_seed(seeds["gumbel"])
    state.dropout_state = dropout_state
    state.labeled_stream = RecordStream(n_labeled, np.random.default_rng(seeds["data_labeled"]))
    state.unlabeled_stream = RecordStream(n_unlabeled, np.random.default_rng(seeds["data_unlabeled"]))
    return state


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "model_config": state.model_cfg.to_dict(),
        "train_config": state.train_cfg.to_dict(),
        "preprocess_config": state.preprocess_cfg.to_dict(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "rng": {
            "gaussian": state.gaussian.get_state(),
            "gumbel": state.gumbel.get_state(),
            "dropout": state.dropout_state,
        },
        "streams": {
            "labeled": state.labeled_stream.state() if state.labeled_stream else None,
            "unlabeled": state.unlabeled_stream.state() if state.unlabeled_stream else None,
        },
        "class_stats": None if state.class_stats is None else state.class_stats.to_list(),
        "metrics": state.metrics,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupted or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an ssvae checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def load_model(path: str | os.PathLike) -> tuple[SemiSupervisedVAE, dict]:
    """Model (in eval mode) plus the raw checkpoint payload."""
    payload = read_checkpoint(path)
    cfg = ModelConfig.from_dict(payload["model_config"])
    dtype = TrainConfig.from_dict(payload["train_config"]).torch_dtype
    model = SemiSupervisedVAE(cfg).to(dtype)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


def state_from_checkpoint(payload: Mapping, train_cfg: TrainConfig | None = None) -> TrainState:
    saved_train = TrainConfig.from_dict(payload["train_config"])
    if train_cfg is not None:
        for name in TrainConfig.__dataclass_fields__:
            if name in ("total_steps", "checkpoint_interval"):
                continue
            if getattr(train_cfg, name) != getattr(saved_train, name):
                raise CheckpointError(
                    f"config mismatch on field {name!r}: checkpoint has {getattr(saved_train, name)!r}, "
                    f"got {getattr(train_cfg, name)!r}"
                )
    cfg = train_cfg or saved_train
    model_cfg = ModelConfig.from_dict(payload["model_config"])
    pre = PreprocessConfig.from_dict(payload["preprocess_config"])
    streams = payload["streams"]
    state = new_state(model_cfg, cfg, pre, len(streams["labeled"]["perm"]), len(streams["unlabeled"]["perm"]))
    state.model.load_state_dict(payload["model_state"])
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.step = int(payload["step"])
    state.gaussian.set_state(payload["rng"]["gaussian"])
    state.gumbel.set_state(payload["rng"]["gumbel"])
    state.dropout_state = payload["rng"]["dropout"]
    state.labeled_stream.restore(streams["labeled"])
    state.unlabeled_stream.restore(streams["unlabeled"])
    if payload.get("class_stats") is not None:
        state.class_stats = ClassStats(tuple(payload["class_stats"]))
    state.metrics = list(payload.get("metrics", []))
    return state


def write_metrics(path: str | os.PathLike, metrics: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})
    return path


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _class_stats(manifest: DatasetManifest) -> ClassStats:
    pairs = [(record_class(r), r.survival_days) for r in manifest if r.survival_days is not None]
    return ClassStats.from_days([c for c, _ in pairs], [d for _, d in pairs])


def _labels(manifest: DatasetManifest) -> np.ndarray:
    return np.asarray([record_class(r) for r in manifest], dtype=np.int64)


def _run(
    state: TrainState,
    x_lab: np.ndarray,
    y_lab: np.ndarray,
    x_unl: np.ndarray,
    out_dir: Path | None,
    stop_step: int | None = None,
) -> TrainState:
    cfg = state.train_cfg
    channels = state.model_cfg.channel_count
    dtype = cfg.torch_dtype
    n_l, n_u = batch_composition(cfg.batch_size, len(x_lab), len(x_unl), cfg.min_labeled_per_batch)
    end = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    model = state.model
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.set_rng_state(state.dropout_state)
        while state.step < end:
            ocfg = state.objective_config
            li = state.labeled_stream.take(n_l)
            ui = state.unlabeled_stream.take(n_u) if n_u else np.zeros(0, dtype=np.int64)
            xl = to_one_hot(x_lab[li], channels).to(dtype)
            yl = torch.from_numpy(y_lab[li])
            xu = to_one_hot(x_unl[ui], channels).to(dtype) if n_u else None
            noise = ObjectiveNoise.sample(
                n_l, n_u, state.model_cfg.latent_size, state.model_cfg.class_count, state.gaussian, state.gumbel, dtype
            )
            obj = combined_objective(xl, yl, xu, model, ocfg, noise, cfg.unlabeled_estimator)
            if not torch.isfinite(obj.total):
                state.dropout_state = torch.get_rng_state()
                diag = save_checkpoint(state, out_dir / "diagnostic.pt") if out_dir else None
                raise TrainingDiverged(state.step, diag)
            state.optimizer.zero_grad(set_to_none=True)
            (-obj.total).backward()
            state.optimizer.step()
            terms = obj.terms()
            state.metrics.append(
                {"step": state.step, **terms, "beta": ocfg.beta, "tau": ocfg.tau, "alpha": ocfg.alpha, "gamma": ocfg.gamma}
            )
            state.step += 1
            if out_dir and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                state.dropout_state = torch.get_rng_state()
                state.checkpoints.append(save_checkpoint(state, out_dir / f"checkpoint_{state.step:07d}.pt"))
                write_metrics(out_dir / "metrics.csv", state.metrics)
        state.dropout_state = torch.get_rng_state()
    model.eval()
    if out_dir:
        state.checkpoints.append(save_checkpoint(state, out_dir / "checkpoint.pt"))
        write_metrics(out_dir / "metrics.csv", state.metrics)
    return state


def _prepare(manifest: DatasetManifest, pre: PreprocessConfig, model_cfg: ModelConfig):
    if tuple(pre.target_shape) != tuple(model_cfg.input_shape):
        raise ValueError(f"preprocessing target {pre.target_shape} does not match model input {model_cfg.input_shape}")
    labeled, unlabeled = manifest.labeled, manifest.unlabeled
    if len(labeled) == 0:
        raise ValueError("training needs at least one labeled record")
    return labeled, unlabeled, load_volumes(labeled, pre), _labels(labeled), load_volumes(unlabeled, pre)


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    preprocess_cfg: PreprocessConfig,
    out_dir: str | os.PathLike | None = None,
    stop_step: int | None = None,
) -> TrainState:
    """Train from scratch. Labeled records are those with a class or survival days.

    Writes ``checkpoint.pt`` (+ periodic ones) and ``metrics.csv`` under ``out_dir``.
    ``stop_step`` halts early, leaving a resumable state.
    """
    labeled, unlabeled, x_lab, y_lab, x_unl = _prepare(manifest, preprocess_cfg, model_cfg)
    state = new_state(model_cfg, train_cfg, preprocess_cfg, len(labeled), len(unlabeled))
    state.class_stats = _class_stats(labeled)
    log.info("training on %d labeled + %d unlabeled records", len(labeled), len(unlabeled))
    return _run(state, x_lab, y_lab, x_unl, Path(out_dir) if out_dir else None, stop_step)


def resume(
    checkpoint: str | os.PathLike,
    manifest: DatasetManifest,
    train_cfg: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainState:
    payload = read_checkpoint(checkpoint)
    state = state_from_checkpoint(payload, train_cfg)
    labeled, unlabeled, x_lab, y_lab, x_unl = _prepare(manifest, state.preprocess_cfg, state.model_cfg)
    if len(labeled) != state.labeled_stream.n or len(unlabeled) != state.unlabeled_stream.n:
        raise CheckpointError(
            f"manifest has {len(labeled)}/{len(unlabeled)} labeled/unlabeled records, "
            f"checkpoint was trained on {state.labeled_stream.n}/{state.unlabeled_stream.n}"
        )
    return _run(state, x_lab, y_lab, x_unl, Path(out_dir) if out_dir else None)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    v = np.asarray(values, dtype=float)
    k = len(v) // window
    return v[: k * window].reshape(k, window).mean(axis=1)


def metrics_recombine_error(row: Mapping[str, Any]) -> float:
    expected = recombine(row, row["alpha"], row["beta"], row["gamma"])
    return abs(expected - row["total"]) / max(abs(row["total"]), 1e-12)
