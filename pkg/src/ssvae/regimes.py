"""Experimental regimes: fold construction, unlabeled-pool assembly and the 3-fold pipeline.

S0 trains every fold on its labeled split plus the unlabeled pool as given.
S1 additionally expands the pool with boundary-jittered re-renderings of
each unlabeled subject and left-right flips. Pool entries derived from a
fold's validation subjects are always dropped from that fold.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ssvae.evaluation import CvSplit, FoldModel, build_report, make_cv_splits, vote, pooled_stats, class_to_days, write_predictions, write_report
from ssvae.volumes import DatasetManifest, SegVolume, SubjectRecord

REGIMES = ("S0", "S1")


def jitter_boundaries(v: SegVolume, seed: int, subject_key: str = "", p: float = 0.25) -> SegVolume:
    """Randomly erode/dilate each nested structure by one voxel at its boundary.

    Stands in for a different segmentation method's take on the same subject.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(subject_key.encode())]))
    masks = []
    for level in (1, 2, 3):
        m = v.data >= level
        inner = m & ~ndimage.binary_erosion(m)
        outer = ndimage.binary_dilation(m) & ~m
        m = (m & ~(inner & (rng.random(m.shape) < p))) | (outer & (rng.random(m.shape) < p))
        masks.append(m)
    masks[1] &= masks[0]
    masks[2] &= masks[1]
    return SegVolume(sum(m.astype(np.uint8) for m in masks), num_labels=v.num_labels)


@dataclass(frozen=True)
class RegimeSpec:
    regime: str
    labeled: DatasetManifest
    unlabeled: tuple[DatasetManifest, ...] = ()
    flip: bool = False
    jitter_copies: int = 0
    include_labeled_in_pool: bool = False
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))

    @classmethod
    def s0(cls, labeled, unlabeled=(), seed=0, folds=3) -> "RegimeSpec":
        return cls("S0", labeled, tuple(_as_tuple(unlabeled)), seed=seed, folds=folds)

    @classmethod
    def s1(cls, labeled, unlabeled=(), seed=0, folds=3, jitter_copies=3, flip=True, include_labeled_in_pool=True):
        return cls("S1", labeled, tuple(_as_tuple(unlabeled)), flip=flip, jitter_copies=jitter_copies,
                   include_labeled_in_pool=include_labeled_in_pool, seed=seed, folds=folds)  # fmt: skip


def _as_tuple(m):
    return (m,) if isinstance(m, DatasetManifest) else tuple(m)


def _strip_label(r: SubjectRecord) -> SubjectRecord:
    return replace(r, survival_days=None, class_label=None)


def unlabeled_view(m: DatasetManifest) -> DatasetManifest:
    """The same records with survival and class removed."""
    return DatasetManifest(tuple(_strip_label(r) for r in m))


def unlabeled_pool(spec: RegimeSpec) -> DatasetManifest:
    sources: list[SubjectRecord] = []
    for m in spec.unlabeled:
        sources.extend(_strip_label(r) for r in m)
    if spec.include_labeled_in_pool:
        sources.extend(_strip_label(replace(r, subject_id=f"{r.subject_id}__pool", source_id=r.base_id)) for r in spec.labeled)
    pool = list(sources)
    for k in range(1, spec.jitter_copies + 1):
        for r in sources:
            tag = f"jitter{k}" if not r.augment else f"{r.augment}+jitter{k}"
            pool.append(replace(r, subject_id=f"{r.subject_id}__s{k}", augment=tag, source_id=r.base_id))
    if spec.flip:
        pool += [
            replace(r, subject_id=f"{r.subject_id}__flip", augment=(r.augment + "+flip").lstrip("+"), source_id=r.base_id)
            for r in list(pool)
        ]
    return DatasetManifest(tuple(pool))


@dataclass
class FoldData:
    split: CvSplit
    train: DatasetManifest
    validation: DatasetManifest

    @property
    def fold_id(self) -> int:
        return self.split.fold_id


def build_regime(spec: RegimeSpec) -> list[FoldData]:
    labeled = spec.labeled.labeled
    if len(labeled) == 0:
        raise ValueError("regime needs a non-empty labeled manifest")
    pool = unlabeled_pool(spec)
    out = []
    for split in make_cv_splits(labeled.ids, spec.seed, spec.folds):
        held = set(split.validation_ids)
        fold_pool = DatasetManifest(tuple(r for r in pool if r.base_id not in held))
        train = labeled.subset(split.train_ids) + fold_pool
        out.append(FoldData(split, train, labeled.subset(split.validation_ids)))
    return out


def check_no_leakage(folds: Sequence[FoldData]) -> None:
    for f in folds:
        held = set(f.validation.ids)
        leaked = [r.subject_id for r in f.train if r.subject_id in held or r.base_id in held]
        if leaked:
            raise AssertionError(f"fold {f.fold_id}: validation subjects in training data: {leaked[:5]}")


def write_folds(folds: Sequence[FoldData], out_dir: str | os.PathLike) -> list[Path]:
    from ssvae.volumes import write_manifest

    out = Path(out_dir)
    dirs = []
    for f in folds:
        d = out / f"fold_{f.fold_id}"
        write_manifest(d / "train.csv", f.train)
        write_manifest(d / "validation.csv", f.validation)
        (d / "split.json").write_text(
            json.dumps({"fold_id": f.fold_id, "seed": f.split.seed, "train_ids": list(f.split.train_ids),
                        "validation_ids": list(f.split.validation_ids)}, indent=2) + "\n"  # fmt: skip
        )
        dirs.append(d)
    return dirs


@dataclass
class RegimeResult:
    folds: list[FoldData]
    checkpoints: list[Path]
    report: dict
    fold_models: list[FoldModel] = field(default_factory=list)


def run_regime(
    spec: RegimeSpec,
    model_cfg,
    train_cfg,
    preprocess_cfg,
    out_dir: str | os.PathLike,
    holdout: DatasetManifest | None = None,
    supervised_only: bool = False,
) -> RegimeResult:
    """Train one model per fold, evaluate on its own validation split, vote on ``holdout``.

    ``supervised_only`` drops the unlabeled pool (same splits and seeds), for ablations.
    """
    from ssvae.training import train

    out = Path(out_dir)
    folds = build_regime(spec)
    check_no_leakage(folds)
    if supervised_only:
        folds = [FoldData(f.split, f.train.labeled, f.validation) for f in folds]
    write_folds(folds, out)
    fold_models, ckpts = [], []
    for f in folds:
        d = out / f"fold_{f.fold_id}"
        state = train(f.train, model_cfg, train_cfg, preprocess_cfg, d)
        ckpts.append(state.checkpoints[-1])
        fold_models.append(FoldModel(f.fold_id, state.model, preprocess_cfg, state.class_stats, f.validation))
    report = build_report(fold_models, holdout)
    report.update({"regime": spec.regime, "supervised_only": supervised_only, "seed": spec.seed})
    write_report(out / "report.json", report)
    if holdout is not None and len(fold_models) % 2 == 1:
        voted, _ = vote(fold_models, holdout)
        stats_ = pooled_stats(fold_models)
        write_predictions(out / "predictions.csv", holdout.ids, voted, [class_to_days(c, stats_) for c in voted])
    return RegimeResult(folds, ckpts, report, fold_models)
