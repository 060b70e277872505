"""Label-volume ingestion, validation and preprocessing.

Volumes are categorical tumor masks: background 0 plus three nested tumor
structures. Raw BraTS masks store enhancing tumor as 4; it is remapped to 3 on
load so the model can work with the contiguous label set {0, 1, 2, 3}.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

NUM_LABELS = 4
DEFAULT_REMAP: dict[int, int] = {0: 0, 1: 1, 2: 2, 4: 3}
LR_AXIS = 0

BRATS_SHAPE = (240, 240, 155)


class VolumeError(ValueError):
    """Raised for label volumes that violate the admitted label set or geometry."""


class TumorVoxelsLost(VolumeError):
    def __init__(self, count: int):
        super().__init__(f"tumor voxels lost: {count} nonzero voxel(s) fall outside the crop box")
        self.count = count


@dataclass(frozen=True)
class SegVolume:
    """Dense 3D integer label map with values in ``0..num_labels-1``."""

    data: np.ndarray
    num_labels: int = NUM_LABELS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected a 3D label map, got {data.ndim}D")
        if min(data.shape) <= 0:
            raise VolumeError(f"shape components must be positive, got {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise VolumeError("label maps must hold integer values")
        lo, hi = int(data.min()), int(data.max())
        if lo < 0 or hi >= self.num_labels:
            bad = lo if lo < 0 else hi
            raise VolumeError(f"label value {bad} outside 0..{self.num_labels - 1}")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.data.ravel(), minlength=self.num_labels)


@dataclass(frozen=True)
class OneHotVolume:
    """Channel-first real-valued volume of shape ``(C, d1, d2, d3)``."""

    data: np.ndarray

    def __post_init__(self):
        if np.asarray(self.data).ndim != 4:
            raise VolumeError(f"one-hot volumes are 4D (C, d1, d2, d3), got {np.asarray(self.data).ndim}D")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape[1:])

    def argmax(self) -> SegVolume:
        return SegVolume(np.argmax(self.data, axis=0).astype(np.uint8), num_labels=self.channels)


@dataclass(frozen=True)
class PreprocessConfig:
    """Crop box + stride-subsampling factor.

    ``crop_origin=None`` centers the box in the input volume. With
    ``auto_center`` enabled, a box that would discard tumor voxels is moved to
    center on the tumor bounding box instead of raising.
    """

    crop_size: tuple[int, int, int] = (146, 188, 128)
    crop_origin: tuple[int, int, int] | None = None
    downsample_factor: int = 2
    auto_center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(s) for s in self.crop_size))
        if self.crop_origin is not None:
            object.__setattr__(self, "crop_origin", tuple(int(s) for s in self.crop_origin))
        if len(self.crop_size) != 3 or min(self.crop_size) <= 0:
            raise VolumeError(f"crop_size must be three positive ints, got {self.crop_size}")
        if self.downsample_factor < 1:
            raise VolumeError("downsample_factor must be a positive integer")
        for s in self.crop_size:
            if s % self.downsample_factor:
                raise VolumeError(
                    f"crop extent {self.crop_size} not divisible by factor {self.downsample_factor}"
                )

    @property
    def target_shape(self) -> tuple[int, int, int]:
        return tuple(s // self.downsample_factor for s in self.crop_size)

    def box_for(self, shape: Sequence[int]) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        if self.crop_origin is not None:
            return self.crop_origin, self.crop_size
        origin = tuple((int(n) - s) // 2 for n, s in zip(shape, self.crop_size))
        return origin, self.crop_size

    def to_dict(self) -> dict:
        return {
            "crop_size": list(self.crop_size),
            "crop_origin": None if self.crop_origin is None else list(self.crop_origin),
            "downsample_factor": self.downsample_factor,
            "auto_center": self.auto_center,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreprocessConfig":
        return cls(
            crop_size=tuple(d.get("crop_size", cls.crop_size)),
            crop_origin=None if d.get("crop_origin") is None else tuple(d["crop_origin"]),
            downsample_factor=int(d.get("downsample_factor", 2)),
            auto_center=bool(d.get("auto_center", True)),
        )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _remap(raw: np.ndarray, remap: Mapping[int, int]) -> np.ndarray:
    values = np.unique(raw)
    for v in values:
        if int(v) not in remap:
            raise VolumeError(f"unknown label value {int(v)} (admitted: {sorted(remap)})")
    lut = np.zeros(int(values.max()) + 1, dtype=np.uint8)
    for src, dst in remap.items():
        if src < lut.size:
            lut[src] = dst
    return lut[raw.astype(np.int64)]


def _raw_sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_raw_volume(path: str | os.PathLike, volume: SegVolume, label_map: Mapping[int, int] | None = None) -> Path:
    """Write a uint8 little-endian blob plus a JSON sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    label_map = {int(k): int(v) for k, v in (label_map or {i: i for i in range(volume.num_labels)}).items()}
    header = {
        "shape": list(volume.shape),
        "axis_order": "C",
        "dtype": "uint8",
        "label_map": {str(k): v for k, v in sorted(label_map.items())},
    }
    path.write_bytes(np.ascontiguousarray(volume.data, dtype="<u1").tobytes(order="C"))
    _raw_sidecar(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def _read_raw(path: Path) -> tuple[np.ndarray, dict[int, int] | None]:
    sidecar = _raw_sidecar(path)
    try:
        header = json.loads(sidecar.read_text())
        shape = tuple(int(s) for s in header["shape"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise OSError(f"unreadable raw volume header {sidecar}: {exc}") from exc
    blob = path.read_bytes()
    if len(blob) != math.prod(shape):
        raise OSError(f"raw volume {path} holds {len(blob)} bytes, header expects {math.prod(shape)}")
    data = np.frombuffer(blob, dtype="<u1").reshape(shape, order=header.get("axis_order", "C"))
    label_map = header.get("label_map")
    if label_map is not None:
        label_map = {int(k): int(v) for k, v in label_map.items()}
    return data.copy(), label_map


def load_label_volume(path: str | os.PathLike, remap: Mapping[int, int] | None = None) -> SegVolume:
    """Load a label map from NIfTI (``.nii``/``.nii.gz``) or the raw fixture format.

    Raw fixtures carry their own label map in the sidecar; it is used when
    ``remap`` is not given. NIfTI files default to the BraTS remap.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        import nibabel as nib

        try:
            raw = np.asanyarray(nib.load(str(path)).dataobj)
        except Exception as exc:  # nibabel raises a zoo of types for garbled files
            raise OSError(f"unreadable NIfTI file {path}: {exc}") from exc
        if raw.ndim == 4 and raw.shape[-1] == 1:
            raw = raw[..., 0]
        if not np.all(np.equal(np.mod(raw, 1), 0)):
            raise VolumeError(f"{path} holds non-integer label values")
        raw = raw.astype(np.int64)
        table = DEFAULT_REMAP if remap is None else remap
    else:
        raw, sidecar_map = _read_raw(path)
        table = remap if remap is not None else (sidecar_map or DEFAULT_REMAP)
    if raw.ndim != 3:
        raise VolumeError(f"{path}: expected a 3D label map, got shape {raw.shape}")
    if raw.min() < 0:
        raise VolumeError(f"unknown label value {int(raw.min())}")
    return SegVolume(_remap(raw, table))


def save_nifti(path: str | os.PathLike, volume: SegVolume, affine: np.ndarray | None = None) -> Path:
    import nibabel as nib

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(volume.data.astype(np.uint8), np.eye(4) if affine is None else affine)
    nib.save(img, str(path))
    return path


# ---------------------------------------------------------------------------
# preprocessing stages
# ---------------------------------------------------------------------------


def crop_volume(v: SegVolume, origin: Sequence[int], size: Sequence[int]) -> SegVolume:
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    for o, s, n in zip(origin, size, v.shape):
        if o < 0 or s <= 0 or o + s > n:
            raise VolumeError(f"crop box origin={origin} size={size} does not fit inside volume {v.shape}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    out = v.data[sl]
    lost = int(np.count_nonzero(v.data)) - int(np.count_nonzero(out))
    if lost:
        raise TumorVoxelsLost(lost)
    return SegVolume(out.copy(), num_labels=v.num_labels)


def tumor_centered_origin(v: SegVolume, size: Sequence[int]) -> tuple[int, int, int]:
    """Crop origin centering ``size`` on the nonzero bounding box, clipped to the volume."""
    nz = np.nonzero(v.data)
    if nz[0].size == 0:
        return tuple((n - s) // 2 for n, s in zip(v.shape, size))
    origin = []
    for axis, (s, n) in enumerate(zip(size, v.shape)):
        lo, hi = int(nz[axis].min()), int(nz[axis].max())
        o = (lo + hi + 1) // 2 - s // 2
        origin.append(min(max(o, 0), n - s))
    return tuple(origin)


def downsample_labels(v: SegVolume, factor: int) -> SegVolume:
    """Nearest-neighbor stride subsampling; labels are never averaged."""
    factor = int(factor)
    if factor < 1:
        raise VolumeError("factor must be a positive integer")
    if any(n % factor for n in v.shape):
        raise VolumeError(f"shape {v.shape} not divisible by factor {factor}")
    return SegVolume(v.data[::factor, ::factor, ::factor].copy(), num_labels=v.num_labels)


def one_hot_encode(v: SegVolume, num_labels: int | None = None) -> OneHotVolume:
    c = v.num_labels if num_labels is None else num_labels
    eye = np.eye(c, dtype=np.float32)
    return OneHotVolume(np.moveaxis(eye[v.data], -1, 0).copy())


def flip_lr(v: SegVolume, axis: int = LR_AXIS) -> SegVolume:
    return SegVolume(np.flip(v.data, axis=axis).copy(), num_labels=v.num_labels)


def preprocess_labels(v: SegVolume, cfg: PreprocessConfig) -> SegVolume:
    """crop -> downsample, returning the label map at the network resolution."""
    origin, size = cfg.box_for(v.shape)
    try:
        cropped = crop_volume(v, origin, size)
    except TumorVoxelsLost:
        if not cfg.auto_center:
            raise
        cropped = crop_volume(v, tumor_centered_origin(v, size), size)
    return downsample_labels(cropped, cfg.downsample_factor)


def preprocess(v: SegVolume, cfg: PreprocessConfig) -> OneHotVolume:
    return one_hot_encode(preprocess_labels(v, cfg))


def size_reduction(original: Sequence[int], target: Sequence[int]) -> float:
    return 1.0 - math.prod(target) / math.prod(original)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

CLASS_NAMES = ("short", "mid", "long")

MANIFEST_COLUMNS = ("subject_id", "volume_path", "survival_days", "resection_status")
OPTIONAL_COLUMNS = ("class_label", "augment", "source_id")


def class_index(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        idx = int(label)
        if not 0 <= idx < len(CLASS_NAMES):
            raise ValueError(f"class index {idx} out of range")
        return idx
    try:
        return CLASS_NAMES.index(str(label).strip().lower())
    except ValueError:
        if str(label).strip().isdigit():
            return class_index(int(label))
        raise ValueError(f"unknown survival class {label!r}") from None


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    volume_path: str
    survival_days: float | None = None
    class_label: int | None = None
    resection_status: str | None = None
    # "" | "flip" | "jitter<k>" | "jitter<k>+flip"; applied at load time
    augment: str = ""
    source_id: str | None = None

    @property
    def labeled(self) -> bool:
        return self.class_label is not None or self.survival_days is not None

    @property
    def base_id(self) -> str:
        return self.source_id or self.subject_id


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SubjectRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.subject_id in seen:
                raise ValueError(f"duplicate subject_id {r.subject_id!r}")
            seen.add(r.subject_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labeled(self) -> "DatasetManifest":
        return DatasetManifest(tuple(r for r in self.records if r.labeled))

    @property
    def unlabeled(self) -> "DatasetManifest":
        return DatasetManifest(tuple(r for r in self.records if not r.labeled))

    @property
    def n_labeled(self) -> int:
        return sum(r.labeled for r in self.records)

    @property
    def n_unlabeled(self) -> int:
        return len(self.records) - self.n_labeled

    @property
    def ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        by_id = {r.subject_id: r for r in self.records}
        return DatasetManifest(tuple(by_id[i] for i in ids))

    def __add__(self, other: "DatasetManifest") -> "DatasetManifest":
        return DatasetManifest(self.records + other.records)


def record_class(r: SubjectRecord, month_days: float | None = None) -> int | None:
    """Class of a record: explicit label first, otherwise derived from days."""
    if r.class_label is not None:
        return r.class_label
    if r.survival_days is None:
        return None
    from ssvae.evaluation import days_to_class

    return days_to_class(r.survival_days) if month_days is None else days_to_class(r.survival_days, month_days)


def _blank(s: str | None) -> bool:
    return s is None or str(s).strip() == ""


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a manifest CSV. Relative volume paths resolve against the CSV's folder."""
    path = Path(path)
    base = path.parent
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "volume_path"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            vp = row["volume_path"].strip()
            if not os.path.isabs(vp):
                vp = str(base / vp)
            days = row.get("survival_days")
            cls = row.get("class_label")
            records.append(
                SubjectRecord(
                    subject_id=row["subject_id"].strip(),
                    volume_path=vp,
                    survival_days=None if _blank(days) else float(days),
                    class_label=None if _blank(cls) else class_index(cls),
                    resection_status=None if _blank(row.get("resection_status")) else row["resection_status"].strip(),
                    augment="" if _blank(row.get("augment")) else row["augment"].strip(),
                    source_id=None if _blank(row.get("source_id")) else row["source_id"].strip(),
                )
            )
    return DatasetManifest(tuple(records))


def _fmt_days(d: float | None) -> str:
    if d is None:
        return ""
    return repr(float(d))


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest, relative_to: str | os.PathLike | None = None) -> Path:
    """Write a manifest CSV; volume paths are stored relative to the CSV folder when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to is not None else path.parent
    extra = [c for c in OPTIONAL_COLUMNS if any(getattr(r, c) not in (None, "") for r in manifest)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_COLUMNS) + extra)
        for r in manifest:
            vp = r.volume_path
            try:
                vp = os.path.relpath(vp, base)
            except ValueError:
                pass
            row = [r.subject_id, vp, _fmt_days(r.survival_days), r.resection_status or ""]
            for c in extra:
                val = getattr(r, c)
                if c == "class_label":
                    val = "" if val is None else CLASS_NAMES[val]
                row.append("" if val is None else val)
            w.writerow(row)
    return path


def load_record(r: SubjectRecord, remap: Mapping[int, int] | None = None) -> SegVolume:
    """Load a record's volume and apply its augmentation tag."""
    v = load_label_volume(r.volume_path, remap)
    if not r.augment:
        return v
    for op in r.augment.split("+"):
        if op == "flip":
            v = flip_lr(v)
        elif op.startswith("jitter"):
            from ssvae.regimes import jitter_boundaries

            v = jitter_boundaries(v, seed=int(op[len("jitter"):] or 0), subject_key=r.base_id)
        else:
            raise VolumeError(f"unknown augmentation {op!r} for {r.subject_id}")
    return v
