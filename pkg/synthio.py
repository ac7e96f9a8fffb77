"""
Volume/mask file format, study manifests and the synthetic phantom
generator that stands in for the clinical cohort.

File layout (little-endian), for both volumes and masks:

    PROGVOL 1
    kind volume                      (or: kind mask)
    dims W H D
    spacing SX SY SZ                 (mm, repr floats)
    encoding int16le                 (masks: uint8)
    hu_range LO HI                   (volumes only)
    anatomy NAME                     (masks only)
    end
    <W*H*D scalars, x fastest>

Phantom layout, in normalized in-plane coordinates u = (x + 0.5) / W,
v = (y + 0.5) / H, every anatomy extruded through all slices:

    body          ellipse  c=(0.50, 0.50) r=(0.46, 0.40)   outside is air
    body_fat      body minus ellipse r=(0.40, 0.34)
    muscle        ellipse r=(0.40, 0.34) minus ellipse r=(0.36, 0.30)
    lungs         ellipses c=(0.30, 0.45) and (0.70, 0.45) r=(0.13, 0.20)
    heart         ellipse  c=(0.50, 0.52) r=(0.11, 0.10) * sqrt(enlargement)
    epicardial    heart ellipse grown by 0.02, minus heart
    aorta         circle   c=(0.50, 0.33) r=0.04
    spinal_column circle   c=(0.50, 0.73) r=0.05

Later entries overwrite earlier ones, so the masks are disjoint.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    MalformedHeaderError,
    ManifestError,
    PayloadSizeError,
    PhantomLayoutError,
    PrognosisError,
    TruncatedPayloadError,
)
from volume import (
    ANATOMIES,
    DEFAULT_SPACING,
    HU_MAX,
    HU_MIN,
    AnatomyMask,
    StudyRecord,
    Volume,
)

logger = logging.getLogger(__name__)

MAGIC = "PROGVOL 1"
MANIFEST_FORMAT = "prognosis-manifest"
MANIFEST_VERSION = 1
VOLUME_SUFFIX = ".vol"
MASK_SUFFIX = ".mask"

# Tissue base attenuation (HU) before noise
TISSUE_HU = {
    "air": -1000.0,
    "soft_tissue": 40.0,
    "body_fat": -100.0,
    "muscle": 50.0,
    "lungs": -850.0,
    "heart": 45.0,
    "epicardial_fat": -90.0,
    "aorta": 45.0,
    "spinal_column": 250.0,
}
NOISE_SIGMA = 20.0
MIN_INPLANE = 16

# Documented ranges for disease signature strengths
CALCIFICATION_RANGE = (0.0, 0.3)
VERTEBRAL_REDUCTION_RANGE = (0.0, 250.0)
EMPHYSEMA_RANGE = (0.0, 0.9)
ENLARGEMENT_RANGE = (1.0, 1.6)

# Ranges cases are drawn from when building a signal cohort
CASE_CALCIFICATION = (0.05, 0.2)
CASE_VERTEBRAL_REDUCTION = (50.0, 150.0)
CASE_EMPHYSEMA = (0.1, 0.4)
CASE_ENLARGEMENT = (1.1, 1.4)

CALCIUM_FOCUS_HU = (450.0, 800.0)
EMPHYSEMA_HU = (-1000.0, -960.0)


# ---------------------------------------------------------------------------
# Volume / mask files
# ---------------------------------------------------------------------------

def _write_grid(path: str, header: List[str], payload: np.ndarray) -> None:
    text = "\n".join([MAGIC] + header + ["end"]) + "\n"
    with open(path, "wb") as f:
        f.write(text.encode("ascii"))
        f.write(payload.ravel(order="F").tobytes())


def _read_grid(path: str) -> Tuple[Dict[str, List[str]], bytes]:
    with open(path, "rb") as f:
        blob = f.read()

    fields: Dict[str, List[str]] = {}
    pos = 0
    first = True
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise MalformedHeaderError(path, "header is not terminated by 'end'")
        try:
            line = blob[pos:nl].decode("ascii").strip()
        except UnicodeDecodeError:
            raise MalformedHeaderError(path, "header is not ASCII")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise MalformedHeaderError(path, f"bad magic line {line!r}")
            first = False
            continue
        if line == "end":
            break
        parts = line.split()
        if not parts:
            raise MalformedHeaderError(path, "empty header line")
        fields[parts[0]] = parts[1:]
    return fields, blob[pos:]


def _parse_common(path: str, fields: Dict[str, List[str]], kind: str):
    if fields.get("kind") != [kind]:
        raise MalformedHeaderError(path, f"expected kind '{kind}', got {fields.get('kind')}")
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
        encoding = fields["encoding"][0]
    except (KeyError, IndexError, ValueError) as e:
        raise MalformedHeaderError(path, f"missing or invalid field ({e})")
    if len(dims) != 3 or min(dims) < 1:
        raise MalformedHeaderError(path, f"invalid dims {dims}")
    if len(spacing) != 3:
        raise MalformedHeaderError(path, f"invalid spacing {spacing}")
    return dims, spacing, encoding


def _decode_payload(path: str, payload: bytes, dims, dtype) -> np.ndarray:
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(path, expected, len(payload))
    if len(payload) > expected:
        raise PayloadSizeError(path, expected, len(payload))
    return np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")


def write_volume(volume: Volume, path: str) -> None:
    header = [
        "kind volume",
        "dims " + " ".join(str(n) for n in volume.dims),
        "spacing " + " ".join(repr(s) for s in volume.spacing),
        "encoding int16le",
        f"hu_range {volume.hu_range[0]} {volume.hu_range[1]}",
    ]
    _write_grid(path, header, volume.data.astype("<i2"))


def read_volume(path: str) -> Volume:
    fields, payload = _read_grid(path)
    dims, spacing, encoding = _parse_common(path, fields, "volume")
    if encoding != "int16le":
        raise MalformedHeaderError(path, f"unsupported volume encoding '{encoding}'")
    try:
        hu_range = tuple(int(v) for v in fields.get("hu_range", [HU_MIN, HU_MAX]))
    except ValueError:
        raise MalformedHeaderError(path, "invalid hu_range")
    data = _decode_payload(path, payload, dims, "<i2")
    return Volume(data=data.astype(np.int16), spacing=spacing, hu_range=hu_range)


def write_mask(mask: AnatomyMask, path: str, spacing=DEFAULT_SPACING) -> None:
    header = [
        "kind mask",
        "dims " + " ".join(str(n) for n in mask.dims),
        "spacing " + " ".join(repr(float(s)) for s in spacing),
        "encoding uint8",
        f"anatomy {mask.anatomy}",
    ]
    _write_grid(path, header, mask.bits.astype(np.uint8))


def read_mask(path: str) -> AnatomyMask:
    fields, payload = _read_grid(path)
    dims, _, encoding = _parse_common(path, fields, "mask")
    if encoding != "uint8":
        raise MalformedHeaderError(path, f"unsupported mask encoding '{encoding}'")
    anatomy = fields.get("anatomy", [None])[0]
    if anatomy not in ANATOMIES:
        raise MalformedHeaderError(path, f"unknown anatomy {anatomy!r}")
    bits = _decode_payload(path, payload, dims, np.uint8)
    if bits.max(initial=0) > 1:
        raise MalformedHeaderError(path, "mask payload has values other than 0 and 1")
    return AnatomyMask(anatomy=anatomy, bits=bits.astype(bool))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_manifest(studies: Sequence[StudyRecord], out_dir: str, name: str = "manifest.json") -> str:
    """
    Write every study (volume + 7 masks) under out_dir/<study id>/ and a
    JSON manifest referencing them with paths relative to out_dir.
    Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for study in studies:
        study_dir = os.path.join(out_dir, study.id)
        os.makedirs(study_dir, exist_ok=True)
        vol_rel = f"{study.id}/volume{VOLUME_SUFFIX}"
        write_volume(study.volume, os.path.join(out_dir, vol_rel))
        mask_paths = {}
        for anatomy in ANATOMIES:
            rel = f"{study.id}/{anatomy}{MASK_SUFFIX}"
            write_mask(study.masks[anatomy], os.path.join(out_dir, rel), study.volume.spacing)
            mask_paths[anatomy] = rel
        entries.append({
            "id": study.id,
            "volume": vol_rel,
            "masks": mask_paths,
            "label": int(study.label),
            "censor_days": int(study.censor_days),
            "match_group": int(study.match_group),
        })

    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "studies": entries}, f, indent=2)
        f.write("\n")
    logger.info("Wrote manifest with %d studies to %s", len(entries), path)
    return path


def _load_entry(base: str, entry: dict) -> StudyRecord:
    study_id = entry.get("id")
    if not isinstance(study_id, str) or not study_id:
        raise ManifestError(None, "entry without a study id")
    masks_field = entry.get("masks")
    if not isinstance(masks_field, dict) or set(masks_field) != set(ANATOMIES):
        raise ManifestError(study_id, f"mask keys must be exactly {ANATOMIES}")

    vol_path = os.path.join(base, entry.get("volume", ""))
    if not os.path.isfile(vol_path):
        raise ManifestError(study_id, f"volume file not found: {vol_path}")
    try:
        volume = read_volume(vol_path)
    except PrognosisError as e:
        raise ManifestError(study_id, str(e)) from e

    masks = {}
    for anatomy in ANATOMIES:
        mask_path = os.path.join(base, masks_field[anatomy])
        if not os.path.isfile(mask_path):
            raise ManifestError(study_id, f"mask file not found: {mask_path}", anatomy=anatomy)
        try:
            mask = read_mask(mask_path)
        except PrognosisError as e:
            raise ManifestError(study_id, str(e), anatomy=anatomy) from e
        if mask.anatomy != anatomy:
            raise ManifestError(study_id, f"file holds anatomy '{mask.anatomy}'", anatomy=anatomy)
        masks[anatomy] = mask

    try:
        return StudyRecord(
            id=study_id,
            volume=volume,
            masks=masks,
            label=int(entry["label"]),
            censor_days=int(entry.get("censor_days", 0)),
            match_group=int(entry.get("match_group", 0)),
        )
    except (KeyError, TypeError) as e:
        raise ManifestError(study_id, f"missing or invalid field ({e})") from e
    except PrognosisError as e:
        raise ManifestError(study_id, str(e)) from e


def load_manifest(path: str, threads: int = 1) -> List[StudyRecord]:
    """Load and validate every study referenced by a manifest, in manifest order."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(None, f"manifest is not valid JSON ({e})")
    entries = doc.get("studies", []) if isinstance(doc, dict) else None
    if not isinstance(entries, list):
        raise ManifestError(None, "manifest has no 'studies' list")

    base = os.path.dirname(os.path.abspath(path))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        studies = list(pool.map(lambda e: _load_entry(base, e), entries))

    seen = set()
    for s in studies:
        if s.id in seen:
            raise ManifestError(s.id, "duplicate study id")
        seen.add(s.id)
    logger.info("Loaded %d studies from %s", len(studies), path)
    return studies


# ---------------------------------------------------------------------------
# Phantom generator
# ---------------------------------------------------------------------------

def _check_range(name: str, value: float, bounds: Tuple[float, float]) -> None:
    if not (bounds[0] <= value <= bounds[1]):
        raise PrognosisError(f"PhantomSpec.{name}={value} outside documented range {bounds}")


@dataclass(frozen=True)
class PhantomSpec:
    """
    Everything that determines a phantom. Signature strengths only take
    effect when case_flag is set.
    """
    seed: int
    dims: Tuple[int, int, int] = (64, 64, 16)
    spacing: Tuple[float, float, float] = DEFAULT_SPACING
    case_flag: bool = False
    calcification_density: float = 0.08
    vertebral_hu_reduction: float = 80.0
    emphysema_fraction: float = 0.2
    heart_enlargement: float = 1.2
    noise_sigma: float = NOISE_SIGMA
    study_id: str = "phantom"
    censor_days: int = 1825
    match_group: int = 0

    def __post_init__(self):
        _check_range("calcification_density", self.calcification_density, CALCIFICATION_RANGE)
        _check_range("vertebral_hu_reduction", self.vertebral_hu_reduction, VERTEBRAL_REDUCTION_RANGE)
        _check_range("emphysema_fraction", self.emphysema_fraction, EMPHYSEMA_RANGE)
        _check_range("heart_enlargement", self.heart_enlargement, ENLARGEMENT_RANGE)
        if self.noise_sigma < 0:
            raise PrognosisError("PhantomSpec.noise_sigma must be nonnegative")


def _ellipse(u, v, cu, cv, ru, rv) -> np.ndarray:
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def _layout(dims, heart_scale: float) -> Dict[str, np.ndarray]:
    w, h, d = dims
    u = ((np.arange(w) + 0.5) / w)[:, None]
    v = ((np.arange(h) + 0.5) / h)[None, :]

    body = _ellipse(u, v, 0.5, 0.5, 0.46, 0.40)
    inner_fat = _ellipse(u, v, 0.5, 0.5, 0.40, 0.34)
    inner_muscle = _ellipse(u, v, 0.5, 0.5, 0.36, 0.30)
    lungs = _ellipse(u, v, 0.30, 0.45, 0.13, 0.20) | _ellipse(u, v, 0.70, 0.45, 0.13, 0.20)
    hr_u, hr_v = 0.11 * heart_scale, 0.10 * heart_scale
    heart = _ellipse(u, v, 0.5, 0.52, hr_u, hr_v)
    pericardium = _ellipse(u, v, 0.5, 0.52, hr_u + 0.02, hr_v + 0.02)
    aorta = _ellipse(u, v, 0.5, 0.33, 0.04 * h / w, 0.04)
    spine = _ellipse(u, v, 0.5, 0.73, 0.05 * h / w, 0.05)

    # Paint in order; later labels win.
    order = [
        ("soft_tissue", body),
        ("body_fat", body & ~inner_fat),
        ("muscle", inner_fat & ~inner_muscle),
        ("lungs", lungs),
        ("epicardial_fat", pericardium),
        ("heart", heart),
        ("aorta", aorta),
        ("spinal_column", spine),
    ]
    label = np.full((w, h), "air", dtype=object)
    for name, region in order:
        label[region] = name
    plane = {name: label == name for name in ["air"] + [n for n, _ in order]}
    return {name: np.repeat(region[:, :, None], d, axis=2) for name, region in plane.items()}


def _place_foci(rng: np.random.Generator, region: np.ndarray, density: float) -> np.ndarray:
    """2x2 in-plane calcium foci seeded inside region; returns the focus mask."""
    foci = np.zeros_like(region)
    count = region.sum()
    if count == 0 or density <= 0:
        return foci
    n_foci = max(1, int(round(density * count / 4.0)))
    xs, ys, zs = np.nonzero(region)
    picks = rng.choice(len(xs), size=min(n_foci, len(xs)), replace=False)
    for p in np.sort(picks):
        x, y, z = xs[p], ys[p], zs[p]
        foci[x:x + 2, y:y + 2, z] = True
    return foci & region


def generate_phantom(spec: PhantomSpec) -> StudyRecord:
    """
    Build a deterministic synthetic study from spec. Everything, including
    noise and signature placement, is a pure function of spec.
    """
    w, h, d = spec.dims
    if w < MIN_INPLANE or h < MIN_INPLANE or d < 1:
        raise PhantomLayoutError(spec.dims, f"in-plane size must be at least {MIN_INPLANE}")

    rng = np.random.default_rng(spec.seed)
    heart_scale = float(np.sqrt(spec.heart_enlargement)) if spec.case_flag else 1.0
    regions = _layout(spec.dims, heart_scale)

    for anatomy in ANATOMIES:
        if not regions[anatomy].any():
            raise PhantomLayoutError(spec.dims, f"anatomy '{anatomy}' has no voxels")

    base = np.empty(spec.dims, dtype=np.float64)
    for tissue, region in regions.items():
        base[region] = TISSUE_HU[tissue]
    if spec.case_flag:
        base[regions["spinal_column"]] -= spec.vertebral_hu_reduction

    noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims) if spec.noise_sigma > 0 else 0.0
    hu = base + noise

    if spec.case_flag:
        for anatomy in ("aorta", "heart"):
            foci = _place_foci(rng, regions[anatomy], spec.calcification_density)
            hu[foci] = rng.uniform(*CALCIUM_FOCUS_HU, size=int(foci.sum()))

        lung_idx = np.flatnonzero(regions["lungs"].ravel(order="F"))
        n_low = int(round(spec.emphysema_fraction * len(lung_idx)))
        if n_low:
            chosen = np.sort(rng.choice(lung_idx, size=n_low, replace=False))
            flat = hu.ravel(order="F")
            flat[chosen] = rng.uniform(*EMPHYSEMA_HU, size=n_low)
            hu = flat.reshape(spec.dims, order="F")

    volume = Volume(data=hu, spacing=spec.spacing)
    masks = {a: AnatomyMask(anatomy=a, bits=regions[a]) for a in ANATOMIES}
    return StudyRecord(
        id=spec.study_id,
        volume=volume,
        masks=masks,
        label=1 if spec.case_flag else 0,
        censor_days=spec.censor_days,
        match_group=spec.match_group,
    )


def cohort_specs(n_pairs: int, dims=(64, 64, 16), spacing=DEFAULT_SPACING, seed: int = 0,
                 signal: bool = True) -> List[PhantomSpec]:
    """
    Phantom specs for n_pairs matched case/control pairs. Each pair shares
    match_group and censor_days; cases draw signature strengths from the
    CASE_* ranges. With signal=False cases carry no signatures at all.
    """
    if n_pairs < 0:
        raise PrognosisError("n_pairs must be nonnegative")
    rng = np.random.default_rng(seed)
    specs = []
    for group in range(n_pairs):
        censor = int(rng.integers(1095, 1826))
        control_seed, case_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
        strengths = dict(
            calcification_density=float(rng.uniform(*CASE_CALCIFICATION)),
            vertebral_hu_reduction=float(rng.uniform(*CASE_VERTEBRAL_REDUCTION)),
            emphysema_fraction=float(rng.uniform(*CASE_EMPHYSEMA)),
            heart_enlargement=float(rng.uniform(*CASE_ENLARGEMENT)),
        )
        common = dict(dims=tuple(dims), spacing=tuple(spacing), censor_days=censor, match_group=group)
        specs.append(PhantomSpec(seed=control_seed, case_flag=False,
                                 study_id=f"pair{group:03d}_control", **common))
        case = PhantomSpec(seed=case_seed, case_flag=True, study_id=f"pair{group:03d}_case",
                           **common, **strengths)
        if not signal:
            case = replace(case, calcification_density=0.0, vertebral_hu_reduction=0.0,
                           emphysema_fraction=0.0, heart_enlargement=1.0)
        specs.append(case)
    return specs


def generate_cohort(n_pairs: int, dims=(64, 64, 16), spacing=DEFAULT_SPACING, seed: int = 0,
                    signal: bool = True, threads: int = 1) -> List[StudyRecord]:
    specs = cohort_specs(n_pairs, dims, spacing, seed, signal)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(generate_phantom, specs))


def permute_labels_within_pairs(studies: Sequence[StudyRecord], seed: int) -> List[StudyRecord]:
    """
    Label-null cohort: within each match group the two labels are swapped
    with probability 1/2, so every pair still holds one case and one control.
    """
    rng = np.random.default_rng(seed)
    groups = sorted({s.match_group for s in studies})
    flips = {g: bool(rng.integers(0, 2)) for g in groups}
    out = []
    for s in studies:
        label = 1 - s.label if flips[s.match_group] else s.label
        out.append(replace(s, label=label))
    return out
