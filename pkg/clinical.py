"""
Chronic-disease-burden scores: bone mineral density proxy, emphysema
low-attenuation fraction and Agatston-style calcium score.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from errors import ConfigError
from volume import EMPTY_SENTINEL, AnatomyMask, Volume, check_aligned

EMPHYSEMA_THRESHOLD = -950.0
CALCIUM_THRESHOLD = 130.0
CALCIUM_WEIGHT_BANDS = (200.0, 300.0, 400.0)
MIN_LESION_AREA_MM2 = 1.0

# 8-connected in-plane, never across slices
_SLICE_STRUCTURE = np.zeros((3, 3, 3), dtype=bool)
_SLICE_STRUCTURE[:, :, 1] = True


@dataclass(frozen=True)
class ClinicalScoreConfig:
    emphysema_threshold: float = EMPHYSEMA_THRESHOLD
    calcium_threshold: float = CALCIUM_THRESHOLD
    calcium_weight_bands: Tuple[float, float, float] = CALCIUM_WEIGHT_BANDS
    min_lesion_area: float = MIN_LESION_AREA_MM2

    def __post_init__(self):
        bands = tuple(float(b) for b in self.calcium_weight_bands)
        chain = (self.emphysema_threshold, self.calcium_threshold) + bands
        if len(bands) != 3 or any(a >= b for a, b in zip(chain, chain[1:])):
            raise ConfigError(
                "Clinical thresholds must be strictly ordered: "
                f"emphysema {self.emphysema_threshold} < calcium {self.calcium_threshold} < bands {bands}"
            )
        if self.min_lesion_area < 0:
            raise ConfigError("min_lesion_area must be nonnegative")
        object.__setattr__(self, "calcium_weight_bands", bands)


def bmd_score(volume: Volume, mask: AnatomyMask) -> float:
    """Mean HU over the spinal column mask (trabecular density proxy)."""
    check_aligned(volume, mask)
    if not mask.bits.any():
        return EMPTY_SENTINEL
    return float(volume.data[mask.bits].astype(np.float64).mean())


def emphysema_score(volume: Volume, mask: AnatomyMask, cfg: ClinicalScoreConfig = ClinicalScoreConfig()) -> float:
    """Fraction of lung voxels below the emphysema threshold (LAA%)."""
    check_aligned(volume, mask)
    n = mask.count
    if n == 0:
        return EMPTY_SENTINEL
    low = np.count_nonzero(volume.data[mask.bits] < cfg.emphysema_threshold)
    return low / n


def calcium_weight(peak_hu: float, cfg: ClinicalScoreConfig = ClinicalScoreConfig()) -> int:
    """Density weight 1-4 from a lesion's peak HU."""
    return 1 + sum(1 for band in cfg.calcium_weight_bands if peak_hu >= band)


def calcium_score(volume: Volume, mask: AnatomyMask, cfg: ClinicalScoreConfig = ClinicalScoreConfig()) -> float:
    """
    Agatston-style score: per axial slice, 8-connected lesions of in-mask
    voxels at or above the calcium threshold; lesions smaller than
    min_lesion_area (mm^2) are dropped; each remaining lesion adds
    area_mm2 * weight(peak HU).
    """
    check_aligned(volume, mask)
    if not mask.bits.any():
        return EMPTY_SENTINEL
    candidates = mask.bits & (volume.data >= cfg.calcium_threshold)
    labeled, n = ndimage.label(candidates, structure=_SLICE_STRUCTURE)
    if n == 0:
        return 0.0

    sx, sy, _ = volume.spacing
    pixel_area = sx * sy
    index = np.arange(1, n + 1)
    areas = np.bincount(labeled.ravel(), minlength=n + 1)[1:] * pixel_area
    peaks = ndimage.maximum(volume.data, labels=labeled, index=index)

    contributions = []
    for area, peak in zip(areas, np.atleast_1d(peaks)):
        if area < cfg.min_lesion_area:
            continue
        contributions.append(float(area) * calcium_weight(float(peak), cfg))
    return math.fsum(contributions)
