"""
Core data model shared by every other module: volumes, anatomy masks,
studies and feature tables.

Arrays are indexed [x, y, z]. Flat serialization is Fortran order, so x is
the fastest-varying axis everywhere (file payloads, voxel scans).
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionMismatchError, PrognosisError

# HU clamp range applied once at ingestion
HU_MIN = -1024
HU_MAX = 3071
DEFAULT_SPACING = (0.7, 0.7, 5.0)

ANATOMIES = (
    "muscle",
    "body_fat",
    "aorta",
    "spinal_column",
    "epicardial_fat",
    "heart",
    "lungs",
)

# Features over an empty mask evaluate to this; extraction zero-fills it.
EMPTY_SENTINEL = float("nan")

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """
    Dense CT volume in Hounsfield units.
    Values are rounded and clamped to hu_range on construction.
    """
    data: np.ndarray
    spacing: Spacing = DEFAULT_SPACING
    hu_range: Tuple[int, int] = (HU_MIN, HU_MAX)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise PrognosisError(f"Volume data must be a non-empty 3D grid, got shape {arr.shape}")
        lo, hi = int(self.hu_range[0]), int(self.hu_range[1])
        if lo >= hi:
            raise PrognosisError(f"Invalid HU clamp range ({lo}, {hi})")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise PrognosisError(f"Voxel spacing must be three positive reals, got {self.spacing}")

        if np.issubdtype(arr.dtype, np.integer):
            clamped = np.clip(arr, lo, hi).astype(np.int16)
        else:
            clamped = np.clip(np.rint(arr), lo, hi).astype(np.int16)

        object.__setattr__(self, "data", _readonly(clamped))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "hu_range", (lo, hi))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing == other.spacing
                and self.hu_range == other.hu_range
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AnatomyMask:
    """Binary segmentation of one anatomy, aligned to its volume."""
    anatomy: str
    bits: np.ndarray

    def __post_init__(self):
        if self.anatomy not in ANATOMIES:
            raise PrognosisError(f"Unknown anatomy '{self.anatomy}'; expected one of {ANATOMIES}")
        arr = np.asarray(self.bits)
        if arr.ndim != 3:
            raise PrognosisError(f"Mask '{self.anatomy}' must be 3D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise PrognosisError(f"Mask '{self.anatomy}' has values outside {{0, 1}}")
            arr = arr.astype(bool)
        else:
            arr = arr.copy()
        object.__setattr__(self, "bits", _readonly(arr))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.bits.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnatomyMask):
            return NotImplemented
        return self.anatomy == other.anatomy and np.array_equal(self.bits, other.bits)

    __hash__ = None


def check_aligned(volume: Volume, mask: AnatomyMask) -> None:
    if volume.dims != mask.dims:
        raise DimensionMismatchError(volume.dims, mask.dims, what=f"mask '{mask.anatomy}'")


@dataclass(frozen=True, eq=False)
class StudyRecord:
    """One subject: CT volume, the seven anatomy masks and the mortality label."""
    id: str
    volume: Volume
    masks: Mapping[str, AnatomyMask]
    label: int
    censor_days: int = 0
    match_group: int = 0

    def __post_init__(self):
        keys = set(self.masks)
        if keys != set(ANATOMIES) or len(self.masks) != len(ANATOMIES):
            missing = sorted(set(ANATOMIES) - keys)
            extra = sorted(keys - set(ANATOMIES))
            raise PrognosisError(
                f"Study '{self.id}' must carry exactly the anatomies {ANATOMIES} "
                f"(missing {missing}, unexpected {extra})"
            )
        for name, mask in self.masks.items():
            if mask.anatomy != name:
                raise PrognosisError(f"Study '{self.id}': mask keyed '{name}' is labelled '{mask.anatomy}'")
            check_aligned(self.volume, mask)
        if self.label not in (0, 1):
            raise PrognosisError(f"Study '{self.id}': label must be 0 or 1, got {self.label!r}")
        if self.censor_days < 0:
            raise PrognosisError(f"Study '{self.id}': censor_days must be nonnegative")
        # canonical anatomy order
        object.__setattr__(self, "masks", {name: self.masks[name] for name in ANATOMIES})

    def mask(self, anatomy: str) -> AnatomyMask:
        return self.masks[anatomy]

    def __eq__(self, other) -> bool:
        if not isinstance(other, StudyRecord):
            return NotImplemented
        return (self.id == other.id
                and self.label == other.label
                and self.censor_days == other.censor_days
                and self.match_group == other.match_group
                and self.volume == other.volume
                and all(self.masks[a] == other.masks[a] for a in ANATOMIES))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Named real-valued feature matrix, one row per study."""
    column_names: Tuple[str, ...]
    values: np.ndarray
    study_ids: Tuple[str, ...]
    catalog_version: str = ""
    labels: Optional[Tuple[int, ...]] = None
    match_groups: Optional[Tuple[int, ...]] = None
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        names = tuple(self.column_names)
        ids = tuple(self.study_ids)
        if len(set(names)) != len(names):
            seen, dupes = set(), []
            for n in names:
                if n in seen:
                    dupes.append(n)
                seen.add(n)
            raise PrognosisError(f"Duplicate feature columns: {dupes[:5]}")
        values = np.array(self.values, dtype=np.float64).reshape(len(ids), len(names))
        if not np.isfinite(values).all():
            raise PrognosisError("Feature table contains non-finite values")
        for extra in ("labels", "match_groups"):
            seq = getattr(self, extra)
            if seq is not None:
                seq = tuple(int(v) for v in seq)
                if len(seq) != len(ids):
                    raise PrognosisError(f"Feature table {extra} length {len(seq)} != row count {len(ids)}")
                object.__setattr__(self, extra, seq)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "study_ids", ids)
        object.__setattr__(self, "values", _readonly(values))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def rows(self, study_ids: Sequence[str]) -> np.ndarray:
        index = {sid: i for i, sid in enumerate(self.study_ids)}
        return self.values[[index[s] for s in study_ids]]


def masked_voxels(volume: Volume, mask: AnatomyMask) -> Tuple[np.ndarray, np.ndarray]:
    """
    Return (coordinates, HU values) of every voxel where the mask is set,
    in x-fastest scan order.

    Returns:
        coords: int array of shape (k, 3) holding (x, y, z)
        values: int16 array of shape (k,)
    """
    check_aligned(volume, mask)
    # Transposing to [z, y, x] makes C-order nonzero scan x fastest.
    z, y, x = np.nonzero(mask.bits.T)
    coords = np.stack([x, y, z], axis=1).astype(np.int64)
    values = volume.data[x, y, z]
    return coords, values


def masked_values(volume: Volume, mask: AnatomyMask) -> np.ndarray:
    """In-mask HU values as float64, x-fastest order."""
    _, values = masked_voxels(volume, mask)
    return values.astype(np.float64)
