"""Figures written next to the CSV/JSON outputs of the CLI.

Everything renders off-screen with the Agg backend and returns the path of
the saved image.
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ssvae.volumes import CLASS_NAMES  # noqa: E402

# no timestamp or version in the file, so reruns give identical bytes
_PNG_META = {"Software": None}
CLASS_COLORS = ("#c0392b", "#e6a23c", "#2e86c1")
LABEL_COLORS = ("#000000", "#2ecc71", "#f1c40f", "#e74c3c")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def _window(n: int) -> int:
    return max(1, n // 50)


def _smooth(v: np.ndarray, w: int) -> np.ndarray:
    if w <= 1 or len(v) < w:
        return v
    return np.convolve(v, np.ones(w) / w, mode="valid")


def plot_training_curves(metrics: Sequence[Mapping], path: str | os.PathLike) -> Path:
    """Bound terms and schedules against step, each smoothed by a running mean."""
    if not metrics:
        raise ValueError("no metrics to plot")
    step = np.array([m["step"] for m in metrics], dtype=float)
    panels = [
        ("total", "objective"),
        ("reconstruction", "reconstruction log-lik"),
        ("kl", "KL(q(z|x,y) || p(z))"),
        ("entropy", "H(q(y|x))"),
        ("class_log_prob", "log q(y|x), labeled"),
    ]
    fig, axes = plt.subplots(2, 3, figsize=(12, 6.5))
    w = _window(len(step))
    for ax, (key, title) in zip(axes.flat, panels):
        v = np.array([m[key] for m in metrics], dtype=float)
        ax.plot(step, v, color="0.8", lw=0.6)
        sv = _smooth(v, w)
        ax.plot(step[len(step) - len(sv) :], sv, color="k", lw=1.2)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("step")
    ax = axes.flat[-1]
    ax.plot(step, [m["beta"] for m in metrics], color="tab:blue", label="beta")
    ax.set_ylabel("beta", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(step, [m["tau"] for m in metrics], color="tab:red", label="tau")
    ax2.set_ylabel("tau", color="tab:red")
    ax.set_title("schedules", fontsize=10)
    ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_report(report: Mapping, path: str | os.PathLike, title: str = "") -> Path:
    """Accuracy with 95% intervals for each fold, the average and the vote."""
    rows = [(f"fold {r['fold']}", r) for r in report.get("folds", [])]
    if "average" in report:
        rows.append(("average", report["average"]))
    if "majority_vote" in report:
        rows.append(("vote", report["majority_vote"]))
    if not rows:
        raise ValueError("report has no rows")
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.6))
    x = np.arange(len(rows))
    acc = [r["accuracy"] for _, r in rows]
    ci = [r["ci_halfwidth"] for _, r in rows]
    colors = ["0.55"] * len(report.get("folds", [])) + ["k"] * (len(rows) - len(report.get("folds", [])))
    ax.bar(x, acc, yerr=ci, color=colors, capsize=4, width=0.6)
    ax.axhline(1 / 3, ls=":", color="0.4", lw=1)
    ax.set_xticks(x, [name for name, _ in rows])
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title, fontsize=10)
    for xi, a, n in zip(x, acc, [r["n"] for _, r in rows]):
        ax.text(xi, 0.02, f"n={n}", ha="center", fontsize=7, color="w")
    fig.tight_layout()
    return _save(fig, path)


def plot_regime_comparison(reports: Mapping[str, Mapping], path: str | os.PathLike) -> Path:
    """Side-by-side per-fold accuracies for several runs (e.g. semi-supervised vs supervised)."""
    names = list(reports)
    folds = sorted({r["fold"] for rep in reports.values() for r in rep["folds"]})
    fig, ax = plt.subplots(figsize=(2 + 1.5 * len(folds), 3.6))
    width = 0.8 / len(names)
    for i, name in enumerate(names):
        rows = {r["fold"]: r for r in reports[name]["folds"]}
        xs = np.arange(len(folds)) + i * width
        ax.bar(xs, [rows[f]["accuracy"] for f in folds], width, yerr=[rows[f]["ci_halfwidth"] for f in folds],
               capsize=3, label=name)  # fmt: skip
    ax.set_xticks(np.arange(len(folds)) + width * (len(names) - 1) / 2, [f"fold {f}" for f in folds])
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_samples(samples: Mapping[int, Sequence[np.ndarray]], path: str | os.PathLike, max_cols: int = 6) -> Path:
    """Central axial slice of generated label maps: one row per class, one column per shared z."""
    from matplotlib.colors import ListedColormap

    k = min(max_cols, min(len(v) for v in samples.values()))
    classes = sorted(samples)
    fig, axes = plt.subplots(len(classes), k, figsize=(1.6 * k, 1.7 * len(classes)), squeeze=False)
    cmap = ListedColormap(LABEL_COLORS)
    for r, c in enumerate(classes):
        for j in range(k):
            vol = np.asarray(samples[c][j])
            ax = axes[r, j]
            ax.imshow(vol[:, :, vol.shape[2] // 2].T, cmap=cmap, vmin=0, vmax=3, origin="lower", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(CLASS_NAMES[c], color=CLASS_COLORS[c])
            if r == 0:
                ax.set_title(f"z{j}", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_roughness(values: Mapping[int, Sequence[float]], path: str | os.PathLike) -> Path:
    classes = sorted(values)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    data = [np.asarray(values[c], dtype=float) for c in classes]
    ax.boxplot([d[np.isfinite(d)] for d in data], showfliers=False)
    for i, d in enumerate(data, start=1):
        jitter = np.linspace(-0.12, 0.12, len(d)) if len(d) > 1 else np.zeros(1)
        ax.scatter(i + jitter, d, s=8, color=CLASS_COLORS[classes[i - 1]], zorder=3)
    ax.set_xticks(range(1, len(classes) + 1), [CLASS_NAMES[c] for c in classes])
    ax.set_ylabel("boundary roughness")
    lo = min((np.nanmin(d) for d in data if np.isfinite(d).any()), default=0.0)
    if math.isfinite(lo):
        ax.set_ylim(bottom=max(0.0, lo * 0.9))
    fig.tight_layout()
    return _save(fig, path)
