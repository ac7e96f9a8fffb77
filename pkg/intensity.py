"""
Intensity statistics, spatial context, anatomy volumes, and the feature
catalog that assembles every extractor into one row per study.

Conventions: population moments; skewness and excess kurtosis are 0 when
the variance is 0. Histogram energy/entropy use hist_bins equal-width bins
over the volume's HU clamp range, entropy in bits.
"""
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

import clinical
import texture
from errors import ConfigError, ExtractionError, PrognosisError
from volume import (
    ANATOMIES,
    EMPTY_SENTINEL,
    AnatomyMask,
    FeatureTable,
    StudyRecord,
    Volume,
    masked_voxels,
)

logger = logging.getLogger(__name__)

DEFAULT_HIST_BINS = 64
CATALOG_SCHEMA = 1
FEATURE_TABLE_FORMAT = "prognosis-features"

INTENSITY_FEATURES = ("mean", "median", "range", "variance", "skewness", "kurtosis", "energy", "entropy")
SPATIAL_FEATURES = (
    ("centroid_x", "centroid_y", "centroid_z")
    + tuple(f"q{q}_{axis}" for axis in "xyz" for q in range(1, 5))
)
SHAPE_FEATURES = ("volume_ml",)

# anatomy -> (score kind, feature name)
CLINICAL_SCORES = {
    "spinal_column": ("bmd", "bmd_mean_hu"),
    "lungs": ("emphysema", "emphysema_laa"),
    "aorta": ("calcium", "calcium_agatston"),
    "heart": ("calcium", "calcium_agatston"),
}


# ---------------------------------------------------------------------------
# Individual extractors
# ---------------------------------------------------------------------------

def intensity_statistics(volume: Volume, mask: AnatomyMask, bins: int = DEFAULT_HIST_BINS) -> Dict[str, float]:
    """Moments of the raw in-mask HU values plus histogram energy/entropy."""
    _, raw = masked_voxels(volume, mask)
    if raw.size == 0:
        return {name: EMPTY_SENTINEL for name in INTENSITY_FEATURES}
    values = raw.astype(np.float64)
    var = float(np.var(values))
    if var > 0:
        skewness = float(stats.skew(values, bias=True))
        kurtosis = float(stats.kurtosis(values, fisher=True, bias=True))
    else:
        skewness = kurtosis = 0.0

    hist, _ = np.histogram(values, bins=bins, range=volume.hu_range)
    p = hist[hist > 0] / values.size
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "range": float(values.max() - values.min()),
        "variance": var,
        "skewness": skewness,
        "kurtosis": kurtosis,
        "energy": float((p ** 2).sum()),
        "entropy": float(-(p * np.log2(p)).sum()),
    }


def spatial_context(volume: Volume, mask: AnatomyMask) -> Dict[str, float]:
    """
    Intensity-weighted centroid per axis, normalized to the mask bounding
    box (weights HU - min; uniform when all weights vanish; 0.5 on a
    degenerate axis), and the mean HU of four coordinate slabs per axis.
    A slab holding no voxels reports the overall in-mask mean.
    """
    coords, raw = masked_voxels(volume, mask)
    if raw.size == 0:
        return {name: EMPTY_SENTINEL for name in SPATIAL_FEATURES}
    values = raw.astype(np.float64)
    weights = values - values.min()
    if weights.sum() == 0:
        weights = np.ones_like(values)
    overall = float(values.mean())

    out = {}
    for axis, name in enumerate("xyz"):
        c = coords[:, axis]
        lo, hi = int(c.min()), int(c.max())
        extent = hi - lo
        if extent == 0:
            out[f"centroid_{name}"] = 0.5
        else:
            out[f"centroid_{name}"] = (float(np.average(c, weights=weights)) - lo) / extent
        slab = ((c - lo) * 4) // (extent + 1)
        for q in range(4):
            members = values[slab == q]
            out[f"q{q + 1}_{name}"] = float(members.mean()) if members.size else overall
    return {name: out[name] for name in SPATIAL_FEATURES}


def anatomy_volume(mask: AnatomyMask, spacing) -> float:
    """Mask volume in milliliters."""
    sx, sy, sz = spacing
    return mask.count * sx * sy * sz / 1000.0


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogConfig:
    n_levels: int = texture.DEFAULT_LEVELS
    hist_bins: int = DEFAULT_HIST_BINS
    glcm_distance: int = 1
    directions: Tuple[Tuple[int, int, int], ...] = texture.DIRECTIONS
    connectivity: str = texture.DEFAULT_CONNECTIVITY
    mglszm_levels: Tuple[int, ...] = texture.DEFAULT_MGLSZM_LEVELS
    mglszm_weights: Optional[Tuple[float, ...]] = None
    texture_window: Optional[Tuple[float, float]] = None
    per_direction: bool = False
    scores: clinical.ClinicalScoreConfig = field(default_factory=clinical.ClinicalScoreConfig)
    anatomies: Tuple[str, ...] = ANATOMIES

    def __post_init__(self):
        if int(self.glcm_distance) != self.glcm_distance or self.glcm_distance < 1:
            raise ConfigError(f"glcm_distance must be a positive integer, got {self.glcm_distance}")
        if self.n_levels < 2 or self.hist_bins < 1:
            raise ConfigError(f"Need levels >= 2 and hist_bins >= 1, got {self.n_levels} and {self.hist_bins}")
        levels = tuple(int(g) for g in self.mglszm_levels)
        if not levels or min(levels) < 2:
            raise ConfigError(f"MGLSZM level counts must all be >= 2, got {self.mglszm_levels}")
        object.__setattr__(self, "mglszm_levels", levels)
        if self.mglszm_weights is not None:
            weights = tuple(float(w) for w in self.mglszm_weights)
            if len(weights) != len(levels):
                raise ConfigError(f"{len(weights)} MGLSZM weights for {len(levels)} level counts")
            object.__setattr__(self, "mglszm_weights", weights)


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    anatomy: str
    extractor: str
    stat: str
    params: str  # canonical JSON, so entries stay hashable


@dataclass(frozen=True)
class FeatureCatalog:
    entries: Tuple[CatalogEntry, ...]
    version: str

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def to_dict(self) -> dict:
        return {"version": self.version, "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureCatalog":
        entries = tuple(CatalogEntry(**e) for e in doc["entries"])
        catalog = cls(entries=entries, version=catalog_version(entries))
        if catalog.version != doc["version"]:
            raise PrognosisError(f"Catalog version {doc['version']} does not match its entries ({catalog.version})")
        return catalog


def _canon(params: dict) -> str:
    return json.dumps(params, sort_keys=True, separators=(",", ":"))


def catalog_version(entries: Sequence[CatalogEntry]) -> str:
    digest = hashlib.sha256()
    digest.update(str(CATALOG_SCHEMA).encode())
    for e in entries:
        digest.update("\x1f".join((e.name, e.anatomy, e.extractor, e.stat, e.params)).encode())
        digest.update(b"\x1e")
    return f"cat{CATALOG_SCHEMA}-{digest.hexdigest()[:16]}"


def build_catalog(cfg: CatalogConfig = CatalogConfig()) -> FeatureCatalog:
    window = list(cfg.texture_window) if cfg.texture_window is not None else None
    directions = [list(a) for a in cfg.directions]
    groups: List[Tuple[str, Sequence[str], dict]] = [
        ("intensity", INTENSITY_FEATURES, {"bins": cfg.hist_bins}),
        ("spatial", SPATIAL_FEATURES, {}),
        ("shape", SHAPE_FEATURES, {}),
        ("glcm", texture.GLCM_FEATURES, {"levels": cfg.n_levels, "distance": cfg.glcm_distance,
                                          "directions": directions, "window": window,
                                          "per_direction": cfg.per_direction}),
        ("glrlm", texture.GLRLM_FEATURES, {"levels": cfg.n_levels, "directions": directions,
                                            "window": window, "per_direction": cfg.per_direction}),
        ("glszm", texture.GLSZM_FEATURES, {"levels": cfg.n_levels, "window": window,
                                            "connectivity": cfg.connectivity}),
        ("mglszm", texture.GLSZM_FEATURES, {"level_set": list(cfg.mglszm_levels),
                                             "weights": list(cfg.mglszm_weights) if cfg.mglszm_weights else None,
                                             "window": window, "connectivity": cfg.connectivity}),
    ]

    entries = []
    for anatomy in cfg.anatomies:
        if anatomy not in ANATOMIES:
            raise PrognosisError(f"Unknown anatomy '{anatomy}' in catalog config")
        for extractor, stat_names, params in groups:
            p = _canon(params)
            stat_list = list(stat_names)
            if extractor in ("glcm", "glrlm") and cfg.per_direction:
                stat_list += [f"{s}.d{k:02d}" for k in range(len(directions)) for s in stat_names]
            for stat in stat_list:
                entries.append(CatalogEntry(f"{extractor}.{anatomy}.{stat}", anatomy, extractor, stat, p))
        if anatomy in CLINICAL_SCORES:
            kind, stat = CLINICAL_SCORES[anatomy]
            p = _canon({"score": kind, **asdict(cfg.scores)})
            entries.append(CatalogEntry(f"clinical.{anatomy}.{stat}", anatomy, "clinical", stat, p))

    entries = tuple(entries)
    return FeatureCatalog(entries=entries, version=catalog_version(entries))


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

class _StudyContext:
    """Per-study cache of quantized regions shared by the texture extractors."""

    def __init__(self, study: StudyRecord):
        self.study = study
        self._regions: Dict[tuple, texture.QuantizedRegion] = {}

    def region(self, anatomy: str, levels: int, window) -> texture.QuantizedRegion:
        key = (anatomy, levels, None if window is None else tuple(window))
        if key not in self._regions:
            self._regions[key] = texture.quantize(self.study.volume, self.study.masks[anatomy], levels,
                                                  None if window is None else tuple(window))
        return self._regions[key]


def _directional(ctx: _StudyContext, anatomy: str, params: dict, kind: str) -> Dict[str, float]:
    region = ctx.region(anatomy, params["levels"], params["window"])
    directions = [tuple(a) for a in params["directions"]]
    if region.is_empty:
        per_dir = [{name: EMPTY_SENTINEL for name in texture.FEATURES_BY_KIND[kind]} for _ in directions]
    else:
        per_dir = texture.directional_statistics(region, kind, directions, params.get("distance", 1))
    out = texture.average_statistics(per_dir)
    if params.get("per_direction"):
        for k, d in enumerate(per_dir):
            for name, value in d.items():
                out[f"{name}.d{k:02d}"] = value
    return out


def _extract_intensity(ctx, anatomy, params):
    return intensity_statistics(ctx.study.volume, ctx.study.masks[anatomy], params["bins"])


def _extract_spatial(ctx, anatomy, params):
    return spatial_context(ctx.study.volume, ctx.study.masks[anatomy])


def _extract_shape(ctx, anatomy, params):
    return {"volume_ml": anatomy_volume(ctx.study.masks[anatomy], ctx.study.volume.spacing)}


def _extract_glcm(ctx, anatomy, params):
    return _directional(ctx, anatomy, params, "GLCM")


def _extract_glrlm(ctx, anatomy, params):
    return _directional(ctx, anatomy, params, "GLRLM")


def _extract_glszm(ctx, anatomy, params):
    region = ctx.region(anatomy, params["levels"], params["window"])
    return texture.texture_statistics(texture.glszm(region, params["connectivity"]))


def _extract_mglszm(ctx, anatomy, params):
    window = None if params["window"] is None else tuple(params["window"])
    m = texture.mglszm(ctx.study.volume, ctx.study.masks[anatomy], params["level_set"],
                       params["weights"], window, params["connectivity"])
    return texture.texture_statistics(m)


def _extract_clinical(ctx, anatomy, params):
    cfg = clinical.ClinicalScoreConfig(
        emphysema_threshold=params["emphysema_threshold"],
        calcium_threshold=params["calcium_threshold"],
        calcium_weight_bands=tuple(params["calcium_weight_bands"]),
        min_lesion_area=params["min_lesion_area"],
    )
    volume, mask = ctx.study.volume, ctx.study.masks[anatomy]
    kind = params["score"]
    if kind == "bmd":
        return {"bmd_mean_hu": clinical.bmd_score(volume, mask)}
    if kind == "emphysema":
        return {"emphysema_laa": clinical.emphysema_score(volume, mask, cfg)}
    if kind == "calcium":
        return {"calcium_agatston": clinical.calcium_score(volume, mask, cfg)}
    raise PrognosisError(f"Unknown clinical score '{kind}'")


EXTRACTORS: Dict[str, Callable[[_StudyContext, str, dict], Dict[str, float]]] = {
    "intensity": _extract_intensity,
    "spatial": _extract_spatial,
    "shape": _extract_shape,
    "glcm": _extract_glcm,
    "glrlm": _extract_glrlm,
    "glszm": _extract_glszm,
    "mglszm": _extract_mglszm,
    "clinical": _extract_clinical,
}


def extract_features(study: StudyRecord, catalog: FeatureCatalog) -> np.ndarray:
    """
    One finite value per catalog entry, in catalog order. Empty-mask
    sentinels are replaced by 0 with a warning; any extractor failure
    raises ExtractionError and no row is produced.
    """
    ctx = _StudyContext(study)
    computed: Dict[tuple, Dict[str, float]] = {}
    row = np.empty(len(catalog.entries), dtype=np.float64)

    for k, entry in enumerate(catalog.entries):
        key = (entry.anatomy, entry.extractor, entry.params)
        if key not in computed:
            try:
                values = EXTRACTORS[entry.extractor](ctx, entry.anatomy, json.loads(entry.params))
            except Exception as e:
                raise ExtractionError(entry.name, study.id, str(e)) from e
            empty = [name for name, v in values.items() if math.isnan(v)]
            if empty:
                logger.warning("Study %s: %s features over empty '%s' mask set to 0 (%d values)",
                               study.id, entry.extractor, entry.anatomy, len(empty))
                values = {name: (0.0 if math.isnan(v) else v) for name, v in values.items()}
            computed[key] = values
        try:
            value = computed[key][entry.stat]
        except KeyError:
            raise ExtractionError(entry.name, study.id, f"extractor '{entry.extractor}' has no statistic '{entry.stat}'")
        if not math.isfinite(value):
            raise ExtractionError(entry.name, study.id, f"non-finite value {value!r}")
        row[k] = value
    return row


def build_feature_table(studies: Sequence[StudyRecord], catalog: FeatureCatalog, threads: int = 1) -> FeatureTable:
    """Extract every study (optionally in parallel; row order follows studies)."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda s: extract_features(s, catalog), studies))
    values = np.vstack(rows) if rows else np.zeros((0, len(catalog)))
    logger.info("Extracted %d features for %d studies (catalog %s)", len(catalog), len(studies), catalog.version)
    return FeatureTable(
        column_names=catalog.names,
        values=values,
        study_ids=tuple(s.id for s in studies),
        catalog_version=catalog.version,
        labels=tuple(s.label for s in studies),
        match_groups=tuple(s.match_group for s in studies),
        params={"catalog": catalog.to_dict()},
    )


def write_feature_table(table: FeatureTable, path: str) -> str:
    """CSV (study id first, header = catalog names) plus a <path>.meta.json sidecar."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("study_id",) + table.column_names)
        for sid, row in zip(table.study_ids, table.values):
            writer.writerow([sid] + [repr(float(v)) for v in row])

    meta_path = path + ".meta.json"
    studies = []
    for k, sid in enumerate(table.study_ids):
        studies.append({
            "id": sid,
            "label": None if table.labels is None else table.labels[k],
            "match_group": None if table.match_groups is None else table.match_groups[k],
        })
    with open(meta_path, "w") as f:
        json.dump({
            "format": FEATURE_TABLE_FORMAT,
            "version": 1,
            "catalog_version": table.catalog_version,
            "params": table.params,
            "studies": studies,
        }, f, indent=2)
        f.write("\n")
    return meta_path


def read_feature_table(path: str) -> FeatureTable:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise PrognosisError(f"Feature table {path} is empty")
        if not header or header[0] != "study_id":
            raise PrognosisError(f"Feature table {path} must start with a study_id column")
        ids, rows = [], []
        for line in reader:
            if not line:
                continue
            ids.append(line[0])
            try:
                rows.append([float(v) for v in line[1:]])
            except ValueError as e:
                raise PrognosisError(f"Feature table {path}, study '{line[0]}': {e}")

    with open(path + ".meta.json") as f:
        meta = json.load(f)
    by_id = {s["id"]: s for s in meta.get("studies", [])}
    labels = [by_id.get(i, {}).get("label") for i in ids]
    groups = [by_id.get(i, {}).get("match_group") for i in ids]
    names = tuple(header[1:])
    return FeatureTable(
        column_names=names,
        values=np.array(rows, dtype=np.float64).reshape(len(ids), len(names)),
        study_ids=tuple(ids),
        catalog_version=meta.get("catalog_version", ""),
        labels=None if any(v is None for v in labels) else tuple(labels),
        match_groups=None if any(v is None for v in groups) else tuple(groups),
        params=meta.get("params", {}),
    )
