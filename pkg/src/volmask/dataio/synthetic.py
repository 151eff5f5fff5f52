"""Synthetic gray-matter-like cohorts with planted, atlas-aligned atrophy.

Every volume is a smooth population template plus a subject-specific texture
(shared by all sessions of that subject) plus per-session noise. AD subjects
additionally lose intensity inside a few small boxes, the atrophy regions,
with a per-subject depth split across the regions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .manifest import CohortManifest, ManifestRow, write_manifest
from .nifti import save_volume


class CohortGeometryError(ValueError):
    pass


@dataclass
class SyntheticCohortSpec:
    shape: tuple[int, int, int] = (24, 24, 24)
    n_subjects_per_class: int = 40
    sessions_per_subject: int = 1
    n_atrophy_regions: int = 2
    atrophy_size: int = 5
    atrophy_depth_min: float = 0.3
    atrophy_depth_max: float = 0.3
    # spread of each AD subject's depth across atrophy regions (0 = even split)
    regional_variability: float = 0.0
    subject_effect: float = 0.08
    noise: float = 0.02
    smoothing: int = 2
    atlas_tiles: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCohort:
    spec: SyntheticCohortSpec
    volumes: np.ndarray
    manifest: CohortManifest
    atlas: np.ndarray
    atrophy_labels: tuple[int, ...]
    brain_mask: np.ndarray
    regional_depth: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label_index for r in self.manifest.rows])

    @property
    def atrophy_mask(self) -> np.ndarray:
        return np.isin(self.atlas, self.atrophy_labels)

    def row_index(self) -> dict[tuple[str, str], int]:
        return {(r.participant_id, r.session_id): i for i, r in enumerate(self.manifest.rows)}


def triangular_kernel(half_width: int) -> np.ndarray:
    w = (half_width + 1 - np.abs(np.arange(-half_width, half_width + 1))).astype(np.float64)
    return w / w.sum()


def smooth_noise(shape, half_width: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise smoothed by a separable triangular kernel, standardized to zero mean, unit std."""
    vol = rng.uniform(size=shape)
    if half_width > 0:
        k = triangular_kernel(half_width)
        for axis in range(vol.ndim):
            vol = convolve1d(vol, k, axis=axis, mode="reflect")
    std = vol.std()
    return (vol - vol.mean()) / (std if std > 0 else 1.0)


def _ellipsoid(shape) -> np.ndarray:
    grids = np.meshgrid(*[(np.arange(n) + 0.5) / n - 0.5 for n in shape], indexing="ij")
    r2 = sum((g / 0.42) ** 2 for g in grids)
    return r2 <= 1.0


def atrophy_boxes(spec: SyntheticCohortSpec) -> list[tuple[slice, slice, slice]]:
    """Cubic regions spaced evenly along the first axis, centred on the others."""
    D, H, W = spec.shape
    s = spec.atrophy_size
    R = spec.n_atrophy_regions
    boxes = []
    for r in range(R):
        cx = round((r + 1) * D / (R + 1))
        starts = (cx - s // 2, H // 2 - s // 2, W // 2 - s // 2)
        boxes.append(tuple(slice(a, a + s) for a in starts))
    return boxes


def make_atlas(spec: SyntheticCohortSpec, brain: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Integer label volume: atrophy boxes are labels 1..R, brain tiles follow, background is 0."""
    shape = spec.shape
    boxes = atrophy_boxes(spec)
    s = spec.atrophy_size
    occupied = np.zeros(shape, dtype=bool)
    for box in boxes:
        if any(sl.start < 0 or sl.stop > n for sl, n in zip(box, shape)) or s < 1:
            raise CohortGeometryError(f"atrophy region {box} does not fit inside volume {shape}")
        if not brain[box].all():
            raise CohortGeometryError(f"atrophy region {box} extends outside the brain")
        if occupied[box].any():
            raise CohortGeometryError("atrophy regions overlap")
        occupied[box] = True

    t = spec.atlas_tiles
    idx = np.meshgrid(*[np.minimum(np.arange(n) * t // n, t - 1) for n in shape], indexing="ij")
    tile = (idx[0] * t + idx[1]) * t + idx[2]
    atlas = np.zeros(shape, dtype=np.int16)
    sel = brain & ~occupied
    R = len(boxes)
    lut = np.zeros(t**3, dtype=np.int16)
    present = np.unique(tile[sel])
    lut[present] = np.arange(len(present)) + R + 1
    atlas[sel] = lut[tile[sel]]
    for r, box in enumerate(boxes):
        atlas[box] = r + 1
    return atlas, tuple(range(1, R + 1))


def generate_synthetic_cohort(spec: SyntheticCohortSpec, out_dir=None) -> SyntheticCohort:
    """Build the cohort in memory; with ``out_dir`` also write volumes, atlas and manifest.

    Files: ``volumes/<participant>_<session>.nii.gz`` (float32), ``atlas.nii.gz``
    (int16) and a tab-separated ``manifest.tsv`` with paths relative to it.
    """
    shape = tuple(spec.shape)
    brain = _ellipsoid(shape)
    atlas, atrophy_labels = make_atlas(spec, brain)
    boxes = atrophy_boxes(spec)

    template_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    template = smooth_noise(shape, spec.smoothing, template_rng)
    inside = template[brain]
    template = (template - inside.min()) / (inside.max() - inside.min())
    template = np.where(brain, 0.4 + 0.6 * template, 0.0)

    rows, volumes, regional = [], [], {}
    n = spec.n_subjects_per_class
    for label_index, label in enumerate(("CN", "AD")):
        for s in range(n):
            pid = f"sub-{label}{s + 1:03d}"
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, label_index, s]))
            texture = spec.subject_effect * smooth_noise(shape, spec.smoothing, rng)
            depth = np.zeros(len(boxes))
            if label == "AD":
                total = rng.uniform(spec.atrophy_depth_min, spec.atrophy_depth_max)
                weights = np.clip(1.0 + spec.regional_variability * rng.uniform(-1, 1, len(boxes)), 0.0, None)
                weights = weights / weights.mean() if weights.sum() > 0 else np.ones(len(boxes))
                depth = total * weights
            regional[pid] = depth
            for k in range(spec.sessions_per_subject):
                sid = f"ses-M{12 * k:02d}"
                noise = spec.noise * smooth_noise(shape, 1, rng)
                vol = template + np.where(brain, texture + noise, 0.0)
                for d, box in zip(depth, boxes):
                    vol[box] -= d
                volumes.append(np.clip(vol, 0.0, 1.0).astype(np.float32))
                rows.append(ManifestRow(pid, sid, label, f"volumes/{pid}_{sid}.nii.gz"))

    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = CohortManifest(rows, root=root)
    cohort = SyntheticCohort(spec, np.stack(volumes), manifest, atlas, atrophy_labels, brain, regional)
    if out_dir is not None:
        (root / "volumes").mkdir(parents=True, exist_ok=True)
        for row, vol in zip(rows, cohort.volumes):
            save_volume(vol, root / row.path, datatype=16)
        save_volume(atlas, root / "atlas.nii.gz", datatype=4)
        write_manifest(manifest, root / "manifest.tsv")
    return cohort
