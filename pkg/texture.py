"""
Gray-level quantization and the texture-matrix families (GLCM, GLRLM,
GLSZM, MGLSZM) over masked 3D regions, plus their statistics.

Statistics are computed on the normalized matrix p = M / sum(M), with
1-based gray level index i and 1-based column index j:

GLCM
    energy        sum p^2
    entropy       -sum p log2 p              (0 log 0 = 0)
    contrast      sum (i - j)^2 p
    mean          mu = sum i p
    variance      var = sum (i - mu)^2 p
    correlation   sum (i - mu)(j - mu) p / var
    skewness      sum (i - mu)^3 p / var^1.5
    kurtosis      sum (i - mu)^4 p / var^2 - 3
    homogeneity   sum p / (1 + |i - j|)
GLRLM (j = run length)
    short_run_emphasis     sum p / j^2
    long_run_emphasis      sum p j^2
    gray_level_nonuniformity   sum_i (sum_j p)^2
    run_length_nonuniformity   sum_j (sum_i p)^2
    run_percentage         1 / sum j p      (runs per voxel)
GLSZM / MGLSZM (j = zone size)
    small_zone_emphasis, large_zone_emphasis, zone_size_nonuniformity,
    gray_level_nonuniformity, zone_percentage  (same formulas as GLRLM)

Any ratio whose denominator is zero evaluates to 0. An all-zero matrix
yields EMPTY_SENTINEL for every statistic.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from engines import OptimizedTextureEngine, TextureEngine
from errors import PrognosisError
from volume import EMPTY_SENTINEL, AnatomyMask, Volume, check_aligned

DEFAULT_LEVELS = 32
DEFAULT_MGLSZM_LEVELS = (8, 16, 32, 64)
DEFAULT_CONNECTIVITY = "slice8"

# The 13 unique 3D neighbor directions (one of each +/- pair).
DIRECTIONS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0),
    (1, 0, 1), (1, 0, -1),
    (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
)

GLCM_FEATURES = (
    "energy", "entropy", "contrast", "correlation", "variance",
    "mean", "skewness", "kurtosis", "homogeneity",
)
GLRLM_FEATURES = (
    "short_run_emphasis", "long_run_emphasis", "gray_level_nonuniformity",
    "run_length_nonuniformity", "run_percentage",
)
GLSZM_FEATURES = (
    "small_zone_emphasis", "large_zone_emphasis", "zone_size_nonuniformity",
    "gray_level_nonuniformity", "zone_percentage",
)
FEATURES_BY_KIND = {
    "GLCM": GLCM_FEATURES,
    "GLRLM": GLRLM_FEATURES,
    "GLSZM": GLSZM_FEATURES,
    "MGLSZM": GLSZM_FEATURES,
}

_default_engine = OptimizedTextureEngine()


@dataclass(frozen=True, eq=False)
class QuantizedRegion:
    """Gray levels 1..n_levels inside the mask, 0 outside."""
    levels: np.ndarray
    n_levels: int
    anatomy: str = ""

    @property
    def is_empty(self) -> bool:
        return not bool(np.any(self.levels))

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.levels))


@dataclass(frozen=True, eq=False)
class TextureMatrix:
    kind: str
    entries: np.ndarray
    params: Dict[str, object] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.entries.sum())

    def normalized(self) -> np.ndarray:
        total = self.total
        if total <= 0:
            return np.zeros_like(self.entries, dtype=np.float64)
        return self.entries.astype(np.float64) / total


def quantize(volume: Volume, mask: AnatomyMask, n_levels: int = DEFAULT_LEVELS,
             hu_window: Optional[Tuple[float, float]] = None) -> QuantizedRegion:
    """
    Equal-width binning of in-mask HU into 1..n_levels:
        level = 1 + floor((clamp(v) - lo) * n_levels / (hi - lo)), capped at n_levels.
    With no hu_window the in-mask (min, max) is used; a constant region
    maps entirely to level 1.
    """
    check_aligned(volume, mask)
    if n_levels < 2:
        raise PrognosisError(f"Level count must be at least 2, got {n_levels}")
    levels = np.zeros(volume.dims, dtype=np.int32)
    region = QuantizedRegion(levels=levels, n_levels=n_levels, anatomy=mask.anatomy)
    if not mask.bits.any():
        return region

    values = volume.data[mask.bits].astype(np.float64)
    if hu_window is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            levels[mask.bits] = 1
            return region
    else:
        lo, hi = float(hu_window[0]), float(hu_window[1])
        if not lo < hi:
            raise PrognosisError(f"HU window must satisfy lo < hi, got ({lo}, {hi})")

    clamped = np.clip(values, lo, hi)
    binned = 1 + np.floor((clamped - lo) * n_levels / (hi - lo)).astype(np.int64)
    levels[mask.bits] = np.minimum(binned, n_levels)
    return region


def glcm(region: QuantizedRegion, distance: int = 1, direction=(1, 0, 0),
         engine: Optional[TextureEngine] = None) -> TextureMatrix:
    if int(distance) != distance or distance < 1:
        raise PrognosisError(f"GLCM distance must be a positive integer, got {distance}")
    engine = engine or _default_engine
    offset = tuple(int(distance) * int(a) for a in direction)
    counts = engine.glcm(region.levels, region.n_levels, offset)
    return TextureMatrix("GLCM", counts, {"distance": distance, "direction": tuple(direction),
                                          "n_levels": region.n_levels})


def glrlm(region: QuantizedRegion, direction=(1, 0, 0),
          engine: Optional[TextureEngine] = None) -> TextureMatrix:
    engine = engine or _default_engine
    counts = engine.glrlm(region.levels, region.n_levels, tuple(int(a) for a in direction))
    return TextureMatrix("GLRLM", counts, {"direction": tuple(direction), "n_levels": region.n_levels})


def glszm(region: QuantizedRegion, connectivity: str = DEFAULT_CONNECTIVITY,
          engine: Optional[TextureEngine] = None) -> TextureMatrix:
    engine = engine or _default_engine
    try:
        counts = engine.glszm(region.levels, region.n_levels, connectivity)
    except ValueError as e:
        raise PrognosisError(str(e)) from e
    return TextureMatrix("GLSZM", counts, {"connectivity": connectivity, "n_levels": region.n_levels})


def _pad_to(m: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    out[:m.shape[0], :m.shape[1]] = m
    return out


def mglszm(volume: Volume, mask: AnatomyMask, level_set: Sequence[int] = DEFAULT_MGLSZM_LEVELS,
           weights: Optional[Sequence[float]] = None, hu_window=None,
           connectivity: str = DEFAULT_CONNECTIVITY,
           engine: Optional[TextureEngine] = None) -> TextureMatrix:
    """
    Weighted average of normalized GLSZMs computed at several level counts.
    Smaller matrices are zero-padded to the largest shape before averaging.
    """
    level_set = tuple(int(g) for g in level_set)
    if not level_set:
        raise PrognosisError("MGLSZM needs at least one level count")
    if weights is None:
        weights = [1.0 / len(level_set)] * len(level_set)
    weights = [float(wt) for wt in weights]
    if len(weights) != len(level_set):
        raise PrognosisError("MGLSZM weights must match the level set")
    if any(wt < 0 for wt in weights) or abs(math.fsum(weights) - 1.0) > 1e-9:
        raise PrognosisError(f"MGLSZM weights must be nonnegative and sum to 1, got {weights}")

    components = []
    for g in level_set:
        region = quantize(volume, mask, g, hu_window)
        components.append(glszm(region, connectivity, engine).normalized())

    shape = (max(c.shape[0] for c in components), max(c.shape[1] for c in components))
    acc = np.zeros(shape, dtype=np.float64)
    for wt, comp in zip(weights, components):
        if wt:
            acc += wt * _pad_to(comp, shape)
    return TextureMatrix("MGLSZM", acc, {"level_set": level_set, "weights": tuple(weights),
                                         "connectivity": connectivity})


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def _glcm_statistics(p: np.ndarray) -> Dict[str, float]:
    g = p.shape[0]
    i = np.arange(1, g + 1, dtype=np.float64)[:, None]
    j = np.arange(1, g + 1, dtype=np.float64)[None, :]
    nz = p > 0
    mu = float((i * p).sum())
    di = i - mu
    dj = j - mu
    var = float((di ** 2 * p).sum())
    return {
        "energy": float((p ** 2).sum()),
        "entropy": float(-(p[nz] * np.log2(p[nz])).sum()),
        "contrast": float(((i - j) ** 2 * p).sum()),
        "correlation": _ratio(float((di * dj * p).sum()), var),
        "variance": var,
        "mean": mu,
        "skewness": _ratio(float((di ** 3 * p).sum()), var ** 1.5),
        "kurtosis": _ratio(float((di ** 4 * p).sum()), var ** 2) - 3.0 if var > 0 else 0.0,
        "homogeneity": float((p / (1.0 + np.abs(i - j))).sum()),
    }


def _length_statistics(p: np.ndarray, names: Sequence[str]) -> Dict[str, float]:
    j = np.arange(1, p.shape[1] + 1, dtype=np.float64)[None, :]
    short, long_, size_nu, gray_nu, pct = names
    return {
        short: float((p / j ** 2).sum()),
        long_: float((p * j ** 2).sum()),
        gray_nu: float((p.sum(axis=1) ** 2).sum()),
        size_nu: float((p.sum(axis=0) ** 2).sum()),
        pct: _ratio(1.0, float((p * j).sum())),
    }


def texture_statistics(matrix: TextureMatrix) -> Dict[str, float]:
    """Fixed statistic set for the matrix kind; see the module docstring for formulas."""
    names = FEATURES_BY_KIND[matrix.kind]
    if matrix.total <= 0:
        return {name: EMPTY_SENTINEL for name in names}
    p = matrix.normalized()
    if matrix.kind == "GLCM":
        return _glcm_statistics(p)
    if matrix.kind == "GLRLM":
        return _length_statistics(p, ("short_run_emphasis", "long_run_emphasis",
                                      "run_length_nonuniformity", "gray_level_nonuniformity",
                                      "run_percentage"))
    return _length_statistics(p, ("small_zone_emphasis", "large_zone_emphasis",
                                  "zone_size_nonuniformity", "gray_level_nonuniformity",
                                  "zone_percentage"))


def average_statistics(per_direction: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Mean over directions with math.fsum, so the order of directions never matters."""
    names = list(per_direction[0])
    n = len(per_direction)
    out = {}
    for name in names:
        values = [d[name] for d in per_direction]
        if any(math.isnan(v) for v in values):
            out[name] = EMPTY_SENTINEL
        else:
            out[name] = math.fsum(values) / n
    return out


def directional_statistics(region: QuantizedRegion, kind: str, directions=DIRECTIONS,
                           distance: int = 1, engine: Optional[TextureEngine] = None):
    """Per-direction statistics for GLCM or GLRLM, in the order of directions."""
    stats = []
    for a in directions:
        if kind == "GLCM":
            m = glcm(region, distance, a, engine)
        elif kind == "GLRLM":
            m = glrlm(region, a, engine)
        else:
            raise PrognosisError(f"Directional statistics are defined for GLCM/GLRLM, not {kind}")
        stats.append(texture_statistics(m))
    return stats
