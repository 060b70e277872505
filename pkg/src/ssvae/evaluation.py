"""Survival-group prediction, cross-validation splits, voting and reported metrics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

MONTH_DAYS = 365.25 / 12
SHORT, MID, LONG = 0, 1, 2
Z_95 = 1.96


def days_to_class(days: float, month_days: float = MONTH_DAYS) -> int:
    """short < 10 months <= mid <= 15 months < long."""
    if days < 0:
        raise ValueError("survival days must be non-negative")
    months = days / month_days
    if months < 10:
        return SHORT
    if months <= 15:
        return MID
    return LONG


def class_band(cls: int, month_days: float = MONTH_DAYS) -> tuple[float, float]:
    return [(0.0, 10 * month_days), (10 * month_days, 15 * month_days), (15 * month_days, math.inf)][cls]


def binomial_ci_halfwidth(a: float, n: int, z_star: float = Z_95) -> float:
    """Normal-approximation half-width ``z* sqrt(a (1 - a) / n)``."""
    if n <= 0:
        raise ValueError("n must be a positive integer")
    if not 0.0 <= a <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    return z_star * math.sqrt(a * (1.0 - a) / n)


# ---------------------------------------------------------------------------
# cross-validation splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvSplit:
    fold_id: int
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    seed: int


def make_cv_splits(labeled_ids: Sequence[str], seed: int, folds: int = 3, train_fraction: float = 0.75) -> list[CvSplit]:
    """Independent seeded random 75/25 splits, one per fold (not a partition)."""
    ids = list(labeled_ids)
    if len(ids) < 4:
        raise ValueError(f"need at least 4 labeled records for cross-validation, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    n_train = int(math.floor(train_fraction * len(ids)))
    out = []
    for k in range(1, folds + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        perm = rng.permutation(len(ids))
        out.append(
            CvSplit(
                fold_id=k,
                train_ids=tuple(ids[i] for i in perm[:n_train]),
                validation_ids=tuple(ids[i] for i in perm[n_train:]),
                seed=int(seed),
            )
        )
    return out


# ---------------------------------------------------------------------------
# class decisions
# ---------------------------------------------------------------------------


def decide_class(probs: np.ndarray) -> np.ndarray | int:
    """Argmax with ties broken toward the lower class index."""
    p = np.asarray(probs, dtype=float)
    out = np.argmax(p, axis=-1)
    return int(out) if p.ndim == 1 else out


def majority_vote(preds: Sequence[int], posteriors: Sequence[Sequence[float]] | None = None) -> int:
    """Modal class; ties go to the highest summed posterior, then the lower index."""
    if len(preds) == 0:
        raise ValueError("majority_vote needs at least one prediction")
    counts = np.bincount(np.asarray(preds, dtype=int), minlength=3)
    tied = np.flatnonzero(counts == counts.max())
    if tied.size == 1 or posteriors is None:
        return int(tied[0])
    summed = np.asarray(posteriors, dtype=float).sum(axis=0)
    best = tied[summed[tied] == summed[tied].max()]
    return int(best[0])


@dataclass(frozen=True)
class ClassStats:
    mean_days: tuple[float | None, ...]

    @classmethod
    def from_days(cls, classes: Iterable[int], days: Iterable[float], class_count: int = 3) -> "ClassStats":
        buckets: list[list[float]] = [[] for _ in range(class_count)]
        for c, d in zip(classes, days):
            buckets[int(c)].append(float(d))
        return cls(tuple(float(np.mean(b)) if b else None for b in buckets))

    def to_list(self) -> list[float | None]:
        return list(self.mean_days)


def class_to_days(y: int, stats_: ClassStats) -> float:
    m = stats_.mean_days[int(y)]
    if m is None:
        raise ValueError(f"class {y} absent from training data; no mean survival available")
    return m


def survival_metrics(pred_days: Sequence[float], true_days: Sequence[float], month_days: float = MONTH_DAYS) -> dict:
    p = np.asarray(pred_days, dtype=float)
    t = np.asarray(true_days, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("survival_metrics needs at least one subject")
    se = (p - t) ** 2
    pc = np.array([days_to_class(d, month_days) for d in p])
    tc = np.array([days_to_class(d, month_days) for d in t])
    if p.size > 1 and np.ptp(p) > 0 and np.ptp(t) > 0:
        rho = float(stats.spearmanr(p, t).statistic)
    else:
        rho = float("nan")
    return {
        "accuracy": float(np.mean(pc == tc)),
        "mse": float(se.mean()),
        "median_se": float(np.median(se)),
        "spearman": rho,
        "n": int(p.size),
    }


# ---------------------------------------------------------------------------
# model-backed prediction
# ---------------------------------------------------------------------------


def predict_class(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Classes and posterior probabilities for a batch of one-hot volumes (eval mode)."""
    import torch

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            post = model.classify(model.features(x))
            probs = post.probabilities.double().cpu().numpy()
    finally:
        model.train(was_training)
    return decide_class(probs), probs


def predict_manifest(model, manifest, preprocess_cfg, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    from ssvae.training import load_volumes, to_one_hot

    labels = load_volumes(manifest, preprocess_cfg)
    dtype = next(model.parameters()).dtype
    classes, probs = [], []
    for start in range(0, len(labels), batch_size):
        x = to_one_hot(labels[start : start + batch_size], model.cfg.channel_count).to(dtype)
        c, p = predict_class(model, x)
        classes.append(np.atleast_1d(c))
        probs.append(p)
    return np.concatenate(classes), np.concatenate(probs)


def accuracy_row(correct: Sequence[bool], z_star: float = Z_95) -> dict:
    n = len(correct)
    a = float(np.mean(correct)) if n else float("nan")
    return {"accuracy": a, "ci_halfwidth": binomial_ci_halfwidth(a, n, z_star), "n": n}


def pooled_row(rows: Sequence[Mapping], z_star: float = Z_95) -> dict:
    """Mean of fold accuracies with the interval computed on the pooled subject count."""
    n = sum(int(r["n"]) for r in rows)
    a = float(np.mean([r["accuracy"] for r in rows]))
    return {"accuracy": a, "ci_halfwidth": binomial_ci_halfwidth(a, n, z_star), "n": n}


def write_predictions(path: str | os.PathLike, ids: Sequence[str], classes: Sequence[int], days: Sequence[float]) -> Path:
    from ssvae.volumes import CLASS_NAMES

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "predicted_class", "predicted_days"])
        for sid, c, d in zip(ids, classes, days):
            w.writerow([sid, CLASS_NAMES[int(c)], f"{float(d):.3f}"])
    return path


def write_report(path: str | os.PathLike, report: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    path.write_text(json.dumps(clean(report), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class FoldModel:
    """A trained fold model plus what it needs for inference."""

    fold_id: int
    model: object
    preprocess_cfg: object
    class_stats: ClassStats
    validation: object | None = None


def _true_classes(manifest) -> np.ndarray:
    from ssvae.volumes import record_class

    return np.asarray([record_class(r) for r in manifest], dtype=int)


def _days_metrics(pred_classes, manifest, stats_: ClassStats) -> dict | None:
    days = [r.survival_days for r in manifest]
    if any(d is None for d in days):
        return None
    pred_days = [class_to_days(c, stats_) for c in pred_classes]
    return survival_metrics(pred_days, days)


def evaluate_fold(fm: FoldModel, manifest=None) -> tuple[dict, np.ndarray, np.ndarray]:
    manifest = fm.validation if manifest is None else manifest
    if manifest is None or len(manifest) == 0:
        raise ValueError(f"fold {fm.fold_id}: empty validation manifest")
    classes, probs = predict_manifest(fm.model, manifest, fm.preprocess_cfg)
    truth = _true_classes(manifest)
    if np.any(truth < 0) or None in truth.tolist():
        raise ValueError("validation records must be labeled")
    row = {"fold": fm.fold_id, **accuracy_row(classes == truth)}
    extra = _days_metrics(classes, manifest, fm.class_stats)
    if extra is not None:
        row.update({k: extra[k] for k in ("mse", "median_se", "spearman")})
    return row, classes, probs


def pooled_stats(fold_models: Sequence[FoldModel]) -> ClassStats:
    """Per-class mean days, averaged over folds weighting each fold equally."""
    per_class = []
    for c in range(3):
        vals = [fm.class_stats.mean_days[c] for fm in fold_models if fm.class_stats.mean_days[c] is not None]
        per_class.append(float(np.mean(vals)) if vals else None)
    return ClassStats(tuple(per_class))


def vote(fold_models: Sequence[FoldModel], manifest) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote across fold models; returns classes and summed posteriors."""
    all_c, all_p = [], []
    for fm in fold_models:
        c, p = predict_manifest(fm.model, manifest, fm.preprocess_cfg)
        all_c.append(c)
        all_p.append(p)
    all_c, all_p = np.stack(all_c), np.stack(all_p)
    voted = np.asarray([majority_vote(all_c[:, i], all_p[:, i]) for i in range(all_c.shape[1])], dtype=int)
    return voted, all_p.sum(axis=0)


def build_report(fold_models: Sequence[FoldModel], holdout=None, z_star: float = Z_95) -> dict:
    """Table-shaped report: per-fold rows, pooled average, majority vote on ``holdout``."""
    report: dict = {"folds": [], "z_star": z_star}
    for fm in fold_models:
        target = fm.validation if fm.validation is not None else holdout
        if target is None:
            raise ValueError(f"fold {fm.fold_id} has no validation manifest")
        row, _, _ = evaluate_fold(fm, target)
        report["folds"].append(row)
    if len(report["folds"]) > 1:
        report["average"] = pooled_row(report["folds"], z_star)
    if holdout is not None and len(fold_models) >= 3 and len(fold_models) % 2 == 1:
        if len(holdout) == 0:
            raise ValueError("empty holdout manifest")
        voted, _ = vote(fold_models, holdout)
        truth = _true_classes(holdout)
        row = accuracy_row(voted == truth, z_star)
        extra = _days_metrics(voted, holdout, pooled_stats(fold_models))
        if extra is not None:
            row.update({k: extra[k] for k in ("mse", "median_se", "spearman")})
        report["majority_vote"] = row
    return report
