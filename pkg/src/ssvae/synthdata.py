"""Class-conditional synthetic tumor masks with known survival labels.

Each subject is a perturbed ellipsoid whose radius varies smoothly with
direction. Short survivors get large, jagged tumors; long survivors small,
compact ones. Three nested structures are cut from the same radial profile
at decreasing fractions of the radius, so enhancing (3) lies inside core
(>= 2), which lies inside the whole tumor (>= 1).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from ssvae.evaluation import class_band
from ssvae.volumes import (
    CLASS_NAMES,
    DatasetManifest,
    SegVolume,
    SubjectRecord,
    flip_lr,
    write_manifest,
    write_raw_volume,
)


@dataclass(frozen=True)
class ClassShape:
    base_radius: tuple[float, float]
    roughness: float
    eccentricity: tuple[float, float]
    days_mean: float
    days_spread: float


DEFAULT_CLASSES = (
    ClassShape(base_radius=(8.5, 10.5), roughness=0.45, eccentricity=(0.75, 0.95), days_mean=170.0, days_spread=70.0),
    ClassShape(base_radius=(7.0, 8.5), roughness=0.22, eccentricity=(0.75, 0.95), days_mean=380.0, days_spread=40.0),
    ClassShape(base_radius=(5.5, 7.0), roughness=0.0, eccentricity=(0.75, 0.95), days_mean=700.0, days_spread=200.0),
)


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple[int, int, int] = (64, 64, 48)
    classes: tuple[ClassShape, ...] = DEFAULT_CLASSES
    # normalized-radius cut points for labels >= 2 and == 3
    core_fraction: float = 0.7
    enhancing_fraction: float = 0.4
    center_jitter: float = 3.0
    # frequency band of the radial perturbation (cycles across the unit sphere)
    frequencies: tuple[float, float] = (2.0, 6.0)
    components: int = 24
    max_days: float = 1800.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(
            self, "classes", tuple(c if isinstance(c, ClassShape) else ClassShape(**c) for c in self.classes)
        )
        if len(self.classes) != len(CLASS_NAMES):
            raise ValueError(f"need one shape spec per class ({len(CLASS_NAMES)})")
        if not 0 < self.enhancing_fraction < self.core_fraction < 1:
            raise ValueError("need 0 < enhancing_fraction < core_fraction < 1")
        for c in self.classes:
            if c.roughness < 0 or c.roughness >= 1:
                raise ValueError("roughness must lie in [0, 1)")
            if not 0 < c.base_radius[0] <= c.base_radius[1]:
                raise ValueError("base_radius range must be positive and ordered")

    def max_extent(self, cls: int) -> float:
        c = self.classes[cls]
        return c.base_radius[1] * (1 + c.roughness) + self.center_jitter

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassShape(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}) for c in d["classes"])
        for k in ("shape", "frequencies"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)


def subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _radial_profile(directions: np.ndarray, roughness: float, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """1 + roughness * f(u), f a random band-limited field on the sphere scaled into [-1, 1]."""
    k = spec.components
    w = rng.normal(size=(k, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    w *= rng.uniform(*spec.frequencies, size=(k, 1)) * np.pi
    phase = rng.uniform(0, 2 * np.pi, size=k)
    # draw amplitudes even when roughness == 0 so the rng stream does not depend on the class
    amp = rng.normal(size=k)
    f = np.cos(directions @ w.T + phase) @ amp
    scale = np.abs(amp).sum()
    return 1.0 + roughness * f / scale


def generate_subject(cls: int, spec: SynthSpec, rng: np.random.Generator) -> tuple[SegVolume, float]:
    c = spec.classes[cls]
    half = np.asarray(spec.shape, dtype=float) / 2.0
    if spec.max_extent(cls) >= half.min() - 1:
        raise ValueError(
            f"volume shape {spec.shape} too small for class {CLASS_NAMES[cls]} tumors "
            f"(extent up to {spec.max_extent(cls):.1f} voxels)"
        )
    radius = rng.uniform(*c.base_radius)
    axes = np.array([1.0, rng.uniform(*c.eccentricity), rng.uniform(*c.eccentricity)])
    rng.shuffle(axes)
    center = half - 0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)

    # only the box that can hold the tumor is evaluated
    reach = radius * (1 + c.roughness) + 1
    lo_idx = np.maximum(np.floor(center - reach).astype(int), 0)
    hi_idx = np.minimum(np.ceil(center + reach).astype(int) + 1, spec.shape)
    grid = np.stack(
        np.meshgrid(*(np.arange(a, b, dtype=float) for a, b in zip(lo_idx, hi_idx)), indexing="ij"), axis=-1
    )
    offset = (grid - center) / axes
    dist = np.linalg.norm(offset, axis=-1)
    directions = offset / np.maximum(dist, 1e-9)[..., None]
    profile = _radial_profile(directions.reshape(-1, 3), c.roughness, spec, rng).reshape(dist.shape)
    rho = dist / (radius * profile)

    box = np.zeros(dist.shape, dtype=np.uint8)
    box[rho <= 1.0] = 1
    box[rho <= spec.core_fraction] = 2
    box[rho <= spec.enhancing_fraction] = 3
    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[tuple(slice(a, b) for a, b in zip(lo_idx, hi_idx))] = box

    lo, hi = class_band(cls)
    hi = min(hi, spec.max_days)
    a, b = (lo - c.days_mean) / c.days_spread, (hi - c.days_mean) / c.days_spread
    days = float(stats.truncnorm.rvs(a, b, loc=c.days_mean, scale=c.days_spread, random_state=rng))
    # keep strictly inside the band; band edges are open on one side
    days = float(np.clip(np.round(days, 1), lo + 0.5, hi - 0.5))
    return SegVolume(labels), days


def roughness(v: SegVolume | np.ndarray) -> float:
    """Boundary voxels (tumor voxels with a background 6-neighbour) over tumor volume^(2/3)."""
    data = v.data if isinstance(v, SegVolume) else np.asarray(v)
    tumor = data > 0
    n = int(tumor.sum())
    if n == 0:
        raise ValueError("roughness is undefined for a volume without tumor voxels")
    padded = np.pad(tumor, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    boundary = n - int(interior.sum())
    return boundary / n ** (2.0 / 3.0)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("SSVAE_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def draw_classes(n: int, class_balance: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(class_balance, dtype=float)
    if p.shape != (len(CLASS_NAMES),) or np.any(p < 0) or p.sum() <= 0:
        raise ValueError(f"class_balance needs {len(CLASS_NAMES)} non-negative weights")
    return rng.choice(len(p), size=n, p=p / p.sum())


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    manifest_path: Path
    answers_path: Path
    answers: dict[str, tuple[int, float]] = field(default_factory=dict)


def generate_dataset(
    spec: SynthSpec,
    n_labeled: int,
    n_unlabeled: int,
    out_dir: str | os.PathLike,
    class_balance: Sequence[float] = (1.0, 1.0, 1.0),
    seed: int | None = None,
    flip_unlabeled: bool = False,
    prefix: str = "synth",
) -> SynthDataset:
    """Write volumes, ``manifest.csv`` and the hidden ``answers.csv`` under ``out_dir``.

    Unlabeled records get a class drawn like the labeled ones; it is written
    only to the answers file. Subject ``i`` uses an rng derived from
    ``(seed, i)``, so output does not depend on ``SSVAE_NUM_WORKERS``.
    """
    if n_labeled < 0 or n_unlabeled < 0 or n_labeled + n_unlabeled < 1:
        raise ValueError("need n_labeled, n_unlabeled >= 0 and at least one subject")
    seed = spec.seed if seed is None else int(seed)
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    n = n_labeled + n_unlabeled
    classes = draw_classes(n, class_balance, np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1])))
    width = max(4, len(str(n)))

    def make(i: int):
        vol, days = generate_subject(int(classes[i]), spec, subject_rng(seed, i))
        sid = f"{prefix}_{i:0{width}d}"
        path = write_raw_volume(vol_dir / f"{sid}.bin", vol)
        written = [(sid, path, None)]
        if flip_unlabeled and i >= n_labeled:
            fid = f"{sid}_flip"
            written.append((fid, write_raw_volume(vol_dir / f"{fid}.bin", flip_lr(vol)), sid))
        return days, written

    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        results = list(pool.map(make, range(n)))

    records, answers = [], {}
    for i, (days, written) in enumerate(results):
        labeled = i < n_labeled
        for sid, path, source in written:
            records.append(
                SubjectRecord(
                    subject_id=sid,
                    volume_path=str(path),
                    survival_days=days if labeled else None,
                    resection_status="GTR",
                    source_id=source,
                )
            )
            if not labeled:
                answers[sid] = (int(classes[i]), days)
    manifest = DatasetManifest(tuple(records))
    manifest_path = write_manifest(out / "manifest.csv", manifest)
    answers_path = out / "answers.csv"
    with answers_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "true_class", "true_days"])
        for sid, (cls, days) in answers.items():
            w.writerow([sid, CLASS_NAMES[cls], repr(days)])
    (out / "synth_spec.json").write_text(json.dumps({**spec.to_dict(), "seed": seed}, indent=2, sort_keys=True) + "\n")
    return SynthDataset(manifest, manifest_path, answers_path, answers)


def read_answers(path: str | os.PathLike) -> dict[str, tuple[int, float]]:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["subject_id"]] = (CLASS_NAMES.index(row["true_class"]), float(row["true_days"]))
    return out


def with_answers(manifest: DatasetManifest, answers: Mapping[str, tuple[int, float]]) -> DatasetManifest:
    """Attach hidden answers to unlabeled records (evaluation only, never for training)."""
    from dataclasses import replace

    return DatasetManifest(
        tuple(
            replace(r, survival_days=answers[r.subject_id][1]) if r.subject_id in answers else r for r in manifest
        )
    )
