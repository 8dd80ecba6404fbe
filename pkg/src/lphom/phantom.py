"""Procedural 2-d brain-like phantom slices with known ground-truth structure.

Each image is a pure function of (anatomy seed, pathology, modality, size):
the seed and pathology fix the tissue geometry (skull, cortex, white matter,
ventricles, plus tumors or lesions), and the modality only remaps tissue
classes to intensities.  Because the tissue map never depends on the
modality, images of the same anatomy in different modalities are perfectly
co-registered, which is what makes structural claims about generated data
measurable later.

Pathology semantics (enforced, and covered by tests):

* healthy       - no focal findings, normal ventricles
* glioblastoma  - a single mass with a distinct rim around its core
* sclerosis     - 3 to 8 small disjoint white-matter lesions
* dementia      - ventricles enlarged by >= 1.5x area vs. the same seed healthy

Modality semantics: T1w shows white matter as the brightest tissue, T2w
shows CSF brightest, FLAIR suppresses CSF and highlights lesions, T1ce adds
a strongly enhancing tumor rim (>= 0.9), PD compresses tissue contrast into
the mid range.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor

PATHOLOGIES = ("healthy", "glioblastoma", "sclerosis", "dementia")
MODALITIES = ("T1w", "T1ce", "T2w", "FLAIR", "PD")

# Tissue class ids in the anatomy map.
BACKGROUND, SKULL, GRAY, WHITE, CSF, LESION, TUMOR_CORE, TUMOR_RIM = range(8)

# Per-cell image counts mirroring the coverage table of the source data
# (rows: pathology, columns: modality; 0 marks combinations with no data).
BASE_CELL_COUNTS = {
    "healthy": {"T1w": 957, "T1ce": 0, "T2w": 578, "FLAIR": 0, "PD": 578},
    "glioblastoma": {"T1w": 887, "T1ce": 887, "T2w": 887, "FLAIR": 887, "PD": 0},
    "sclerosis": {"T1w": 49, "T1ce": 30, "T2w": 49, "FLAIR": 49, "PD": 19},
    "dementia": {"T1w": 139, "T1ce": 0, "T2w": 0, "FLAIR": 0, "PD": 0},
}

MANIFEST_HEADER = "# phantom-manifest v1"

VENTRICLE_ENLARGEMENT = 1.35  # per-axis; area ratio 1.82 >= the 1.5 contract

# Modality intensity look-up: tissue class id -> base intensity in [0, 1].
_MODALITY_LUT = {
    "T1w": (0.02, 0.30, 0.55, 0.82, 0.10, 0.45, 0.40, 0.55),
    "T1ce": (0.02, 0.30, 0.55, 0.82, 0.10, 0.45, 0.35, 0.95),
    "T2w": (0.02, 0.20, 0.62, 0.38, 0.95, 0.85, 0.80, 0.60),
    "FLAIR": (0.02, 0.22, 0.60, 0.42, 0.06, 0.92, 0.75, 0.65),
    "PD": (0.02, 0.35, 0.62, 0.55, 0.68, 0.70, 0.66, 0.60),
}


class DataError(ValueError):
    """Malformed labels, manifests or image files."""


@dataclass(frozen=True)
class ConditionLabel:
    """A (pathology, modality) conditioning pair."""

    pathology: str
    modality: str

    def __post_init__(self):
        if self.pathology not in PATHOLOGIES:
            raise DataError(f"unknown pathology {self.pathology!r}; expected one of {PATHOLOGIES}")
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")

    @property
    def pathology_index(self) -> int:
        return PATHOLOGIES.index(self.pathology)

    @property
    def modality_index(self) -> int:
        return MODALITIES.index(self.modality)

    def __str__(self) -> str:
        return f"{self.pathology}:{self.modality}"

    @classmethod
    def parse(cls, text: str) -> "ConditionLabel":
        parts = text.strip().split(":")
        if len(parts) != 2:
            raise DataError(f"expected 'pathology:modality', got {text!r}")
        return cls(parts[0].strip(), parts[1].strip())


def all_labels() -> list:
    return [ConditionLabel(p, m) for p in PATHOLOGIES for m in MODALITIES]


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float, theta: float = 0.0) -> np.ndarray:
    """Boolean mask of a rotated ellipse in [-1, 1]^2 coordinates."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ct, st = math.cos(theta), math.sin(theta)
    xr = (xx - cx) * ct + (yy - cy) * st
    yr = -(xx - cx) * st + (yy - cy) * ct
    return (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0


@dataclass
class AnatomySpec:
    """Deterministic tissue geometry for one anatomy seed and pathology.

    The rasterized tissue map (class ids per pixel) is the ground truth that
    both image synthesis and structural measurements are derived from.
    """

    anatomy_seed: int
    pathology: str
    size: int
    tissue_map: np.ndarray = field(repr=False)
    ventricle_area: int
    lesion_count: int
    tumor_present: bool

    @classmethod
    def build(cls, anatomy_seed: int, pathology: str, size: int) -> "AnatomySpec":
        if pathology not in PATHOLOGIES:
            raise DataError(f"unknown pathology {pathology!r}")
        _check_size(size)
        geom_rng = np.random.default_rng(np.random.SeedSequence((int(anatomy_seed), 0)))

        cx = geom_rng.uniform(-0.04, 0.04)
        cy = geom_rng.uniform(-0.04, 0.04)
        rx = geom_rng.uniform(0.68, 0.76)
        ry = geom_rng.uniform(0.82, 0.90)
        tilt = geom_rng.uniform(-0.12, 0.12)

        tissue = np.full((size, size), BACKGROUND, dtype=np.uint8)
        outer = _ellipse_mask(size, cx, cy, rx, ry, tilt)
        brain = _ellipse_mask(size, cx, cy, rx * 0.92, ry * 0.92, tilt)
        white = _ellipse_mask(size, cx, cy, rx * 0.74, ry * 0.76, tilt)
        tissue[outer] = SKULL
        tissue[brain] = GRAY
        tissue[white] = WHITE

        # Two mirrored slanted ventricles; parameters are drawn before any
        # pathology-specific draws so healthy/dementia share them per seed.
        v_dx = geom_rng.uniform(0.13, 0.18)
        v_dy = geom_rng.uniform(-0.10, 0.00) + cy
        v_rx = geom_rng.uniform(0.055, 0.075)
        v_ry = geom_rng.uniform(0.16, 0.21)
        v_tilt = geom_rng.uniform(0.25, 0.45)
        scale = VENTRICLE_ENLARGEMENT if pathology == "dementia" else 1.0
        left = _ellipse_mask(size, cx - v_dx, v_dy, v_rx * scale, v_ry * scale, v_tilt)
        right = _ellipse_mask(size, cx + v_dx, v_dy, v_rx * scale, v_ry * scale, -v_tilt)
        ventricles = (left | right) & white
        tissue[ventricles] = CSF

        lesion_count = 0
        tumor_present = False
        if pathology == "glioblastoma":
            tumor_present = True
            angle = geom_rng.uniform(0.0, 2.0 * math.pi)
            dist = geom_rng.uniform(0.22, 0.40)
            tcx = cx + dist * math.cos(angle) * 0.9
            tcy = cy + dist * math.sin(angle) * 0.9
            t_rx = geom_rng.uniform(0.09, 0.14)
            t_ry = geom_rng.uniform(0.09, 0.14)
            t_tilt = geom_rng.uniform(0.0, math.pi)
            rim_w = 1.45
            rim = _ellipse_mask(size, tcx, tcy, t_rx * rim_w, t_ry * rim_w, t_tilt) & brain
            core = _ellipse_mask(size, tcx, tcy, t_rx, t_ry, t_tilt) & brain
            tissue[rim] = TUMOR_RIM
            tissue[core] = TUMOR_CORE
        elif pathology == "sclerosis":
            wanted = int(geom_rng.integers(3, 9))
            placed = []
            guard = 0
            while lesion_count < wanted and guard < 400:
                guard += 1
                angle = geom_rng.uniform(0.0, 2.0 * math.pi)
                dist = geom_rng.uniform(0.08, 0.52)
                lcx = cx + dist * math.cos(angle)
                lcy = cy + dist * math.sin(angle)
                l_r = geom_rng.uniform(0.035, 0.055)
                if any((lcx - px) ** 2 + (lcy - py) ** 2 < (l_r + pr + 0.04) ** 2 for px, py, pr in placed):
                    continue
                mask = _ellipse_mask(size, lcx, lcy, l_r, l_r)
                if not mask.any() or not (tissue[mask] == WHITE).all():
                    continue
                tissue[mask] = LESION
                placed.append((lcx, lcy, l_r))
                lesion_count += 1
            if lesion_count < 3:
                raise DataError(
                    f"could not place at least 3 disjoint lesions for seed {anatomy_seed} at size {size}"
                )

        return cls(
            anatomy_seed=int(anatomy_seed),
            pathology=pathology,
            size=size,
            tissue_map=tissue,
            ventricle_area=int((tissue == CSF).sum()),
            lesion_count=lesion_count,
            tumor_present=tumor_present,
        )


def _check_size(size: int) -> None:
    if size < 32 or size % 4 != 0:
        raise ValueError(f"phantom size must be >= 32 and a multiple of 4, got {size}")


def _texture_and_noise(anatomy_seed: int, size: int):
    """Smooth multiplicative texture field plus fine additive noise."""
    tex_rng = np.random.default_rng(np.random.SeedSequence((int(anatomy_seed), 1)))
    coarse = tex_rng.normal(size=(size // 4, size // 4))
    smooth = ndimage.gaussian_filter(coarse, sigma=1.2)
    smooth /= max(np.abs(smooth).max(), 1e-9)
    fieldmap = np.kron(smooth, np.ones((4, 4)))
    fieldmap = ndimage.gaussian_filter(fieldmap, sigma=2.0)
    fieldmap /= max(np.abs(fieldmap).max(), 1e-9)
    noise = tex_rng.normal(scale=0.008, size=(size, size))
    return fieldmap, noise


def render_phantom(spec: AnatomySpec, modality: str) -> np.ndarray:
    """Map a tissue geometry to a modality image; float64 (size, size) in [0, 1]."""
    if modality not in MODALITIES:
        raise DataError(f"unknown modality {modality!r}")
    lut = np.asarray(_MODALITY_LUT[modality], dtype=np.float64)
    img = lut[spec.tissue_map]
    fieldmap, noise = _texture_and_noise(spec.anatomy_seed, spec.size)
    parenchyma = (spec.tissue_map == GRAY) | (spec.tissue_map == WHITE)
    img = np.where(parenchyma, img * (1.0 + 0.06 * fieldmap), img)
    img = ndimage.gaussian_filter(img, sigma=0.5)
    if modality == "T1ce":
        # The enhancing rim is conspicuous in contrast scans; re-stamp it
        # after blurring so its intensity contract survives rasterization.
        rim = spec.tissue_map == TUMOR_RIM
        img[rim] = _MODALITY_LUT["T1ce"][TUMOR_RIM]
    img = img + noise
    return np.clip(img, 0.0, 1.0)


def generate_phantom(anatomy_seed: int, label: ConditionLabel, size: int = 64) -> Tensor:
    """Deterministic phantom image as a (1, size, size) tensor in [0, 1]."""
    spec = AnatomySpec.build(anatomy_seed, label.pathology, size)
    img = render_phantom(spec, label.modality)
    return Tensor(img[None, :, :])


# ---------------------------------------------------------------------------
# Dataset generation and loading
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: ConditionLabel
    split: str
    anatomy_seed: int


@dataclass
class DatasetManifest:
    """Record list plus the 4x5 per-cell coverage matrix."""

    root: str
    records: list

    @property
    def coverage(self) -> np.ndarray:
        cov = np.zeros((len(PATHOLOGIES), len(MODALITIES)), dtype=np.int64)
        for rec in self.records:
            cov[rec.label.pathology_index, rec.label.modality_index] += 1
        return cov

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def cell_records(self, label: ConditionLabel, split: str | None = None) -> list:
        return [
            r
            for r in self.records
            if r.label == label and (split is None or r.split == split)
        ]


def default_cell_counts(scale: float = 0.1) -> dict:
    """Coverage-table counts scaled by ``scale`` and rounded up per cell."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    return {
        p: {m: (math.ceil(c * scale) if c > 0 else 0) for m, c in row.items()}
        for p, row in BASE_CELL_COUNTS.items()
    }


def _validate_counts(counts: dict) -> None:
    for p, row in counts.items():
        if p not in PATHOLOGIES:
            raise DataError(f"unknown pathology {p!r} in counts")
        for m, c in row.items():
            if m not in MODALITIES:
                raise DataError(f"unknown modality {m!r} in counts")
            if c < 0:
                raise ValueError(f"negative count {c} for cell {p}:{m}")


def _anatomy_seed(master_seed: int, p_idx: int, m_idx: int, i: int) -> int:
    ss = np.random.SeedSequence((int(master_seed), p_idx, m_idx, i))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(
    out_dir: str,
    counts: dict | None = None,
    master_seed: int = 0,
    size: int = 64,
    scale: float = 0.1,
) -> DatasetManifest:
    """Render a phantom dataset to PNG files plus a ``manifest.tsv``.

    ``counts`` defaults to the coverage table scaled by ``scale``.  Each cell
    gets a 90/10 train/val split with at least one validation image whenever
    the cell is populated.  The whole dataset is a pure function of
    (master_seed, counts, size).
    """
    _check_size(size)
    if counts is None:
        counts = default_cell_counts(scale)
    _validate_counts(counts)

    img_dir = os.path.join(out_dir, "images")
    records = []
    for p_idx, pathology in enumerate(PATHOLOGIES):
        for m_idx, modality in enumerate(MODALITIES):
            n = int(counts.get(pathology, {}).get(modality, 0))
            if n == 0:
                continue
            os.makedirs(img_dir, exist_ok=True)
            label = ConditionLabel(pathology, modality)
            n_val = max(1, n // 10)
            for i in range(n):
                seed = _anatomy_seed(master_seed, p_idx, m_idx, i)
                img = render_phantom(AnatomySpec.build(seed, pathology, size), modality)
                rel = os.path.join("images", f"{pathology}_{modality}_{i:04d}.png")
                _write_png(os.path.join(out_dir, rel), img)
                split = "val" if i >= n - n_val else "train"
                records.append(ManifestRecord(rel, label, split, seed))

    manifest = DatasetManifest(root=out_dir, records=records)
    os.makedirs(out_dir, exist_ok=True)
    _write_manifest(os.path.join(out_dir, "manifest.tsv"), records)
    return manifest


def _write_png(path: str, img: np.ndarray) -> None:
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path, format="PNG")


def _write_manifest(path: str, records: list) -> None:
    lines = [MANIFEST_HEADER]
    for r in records:
        lines.append(f"{r.path}\t{r.label.pathology}\t{r.label.modality}\t{r.split}\t{r.anatomy_seed}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(manifest_path: str) -> DatasetManifest:
    """Parse a manifest; image files are opened lazily via ``load_image``."""
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DataError(f"{manifest_path} missing manifest header {MANIFEST_HEADER!r}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{manifest_path}:{ln}: expected 5 tab-separated fields, got {len(parts)}")
        path, pathology, modality, split, seed = parts
        if split not in ("train", "val"):
            raise DataError(f"{manifest_path}:{ln}: unknown split {split!r}")
        records.append(
            ManifestRecord(path, ConditionLabel(pathology, modality), split, int(seed))
        )
    return DatasetManifest(root=os.path.dirname(os.path.abspath(manifest_path)), records=records)


def load_image(manifest: DatasetManifest, record: ManifestRecord) -> np.ndarray:
    """Decode one record to a float64 (1, H, W) array in [0, 1]."""
    path = os.path.join(manifest.root, record.path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file missing: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"could not decode image {path}: {exc}") from exc
    return (arr / 255.0)[None, :, :]


def iter_split(manifest: DatasetManifest, split: str, shuffle_seed: int | None = None):
    """Yield (Tensor, ConditionLabel) pairs; order fixed by ``shuffle_seed``."""
    records = manifest.split_records(split)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
        records = [records[i] for i in order]
    for rec in records:
        yield Tensor(load_image(manifest, rec)), rec.label
