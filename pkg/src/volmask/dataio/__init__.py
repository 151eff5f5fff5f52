"""File formats and data sources: NIfTI-1, manifests, checkpoints, synthetic cohorts, montages."""

from __future__ import annotations

import numpy as np

from .checkpoint import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    read_checkpoint,
    write_checkpoint,
)
from .manifest import CohortManifest, ManifestError, ManifestRow, parse_manifest, write_manifest
from .nifti import (
    NiftiDatatypeError,
    NiftiDimensionError,
    NiftiError,
    NiftiHeaderError,
    NiftiMagicError,
    NiftiTruncatedError,
    NiftiVolume,
    load_volume,
    read_nifti,
    save_volume,
    write_nifti,
)
from .render import render_slices
from .synthetic import CohortGeometryError, SyntheticCohort, SyntheticCohortSpec, generate_synthetic_cohort


def load_session_volumes(manifest: CohortManifest, rows=None) -> np.ndarray:
    """Stack the volumes of ``rows`` (default: all rows) into a float32 array (n, D, H, W)."""
    rows = manifest.rows if rows is None else rows
    return np.stack([load_volume(manifest.resolve(r)).astype(np.float32) for r in rows])


__all__ = [
    "CheckpointChecksumError",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "CohortGeometryError",
    "CohortManifest",
    "ManifestError",
    "ManifestRow",
    "NiftiDatatypeError",
    "NiftiDimensionError",
    "NiftiError",
    "NiftiHeaderError",
    "NiftiMagicError",
    "NiftiTruncatedError",
    "NiftiVolume",
    "SyntheticCohort",
    "SyntheticCohortSpec",
    "generate_synthetic_cohort",
    "load_session_volumes",
    "load_volume",
    "parse_manifest",
    "read_checkpoint",
    "read_nifti",
    "render_slices",
    "save_volume",
    "write_checkpoint",
    "write_manifest",
    "write_nifti",
]
