from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

WARM = np.array([255.0, 96.0, 0.0])


def _slice2d(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    # rotate so the last remaining axis points up in the image
    return np.take(vol, index, axis=axis).T[::-1]


def montage(volume: np.ndarray, mask: np.ndarray | None = None, axis: int = 1, indices=None) -> np.ndarray:
    """RGB uint8 montage of slices laid out left to right.

    The volume is shown in grayscale over [0, 1]; the mask density (1 - m) is
    alpha-blended on top in a warm colour, so an all-ones mask leaves pure gray.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {volume.shape}")
    if mask is not None and np.shape(mask) != volume.shape:
        raise ValueError(f"mask shape {np.shape(mask)} differs from volume shape {volume.shape}")
    extent = volume.shape[axis]
    if indices is None:
        indices = [extent // 2]
    indices = list(indices)
    for i in indices:
        if not 0 <= i < extent:
            raise IndexError(f"slice {i} outside [0, {extent}) on axis {axis}")
    tiles = []
    for i in indices:
        gray = np.clip(_slice2d(volume, axis, i), 0.0, 1.0)[..., None] * 255.0
        rgb = np.repeat(gray, 3, axis=-1)
        if mask is not None:
            alpha = np.clip(1.0 - _slice2d(np.asarray(mask, dtype=np.float64), axis, i), 0.0, 1.0)[..., None]
            rgb = (1.0 - alpha) * rgb + alpha * WARM
        tiles.append(rgb)
    return np.round(np.concatenate(tiles, axis=1)).astype(np.uint8)


def render_slices(volume, mask=None, axis: int = 1, indices=None, path="montage.png") -> Path:
    """Write a PNG montage of ``indices`` along ``axis`` (default: coronal middle slice)."""
    path = Path(path)
    img = Image.fromarray(montage(volume, mask, axis, indices), mode="RGB")
    img.save(path, format="PNG")
    return path
