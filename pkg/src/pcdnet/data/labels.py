"""Single-pixel class labels from landmark coordinates."""
from __future__ import annotations

import numpy as np

from ..errors import DataError, LabelCollisionError


def pixel_of(xy: np.ndarray) -> np.ndarray:
    """Nearest pixel (col, row) with halves rounded up: floor(v + 0.5)."""
    return np.floor(np.asarray(xy, dtype=np.float64) + 0.5).astype(np.int64)


def rasterize_labels(annotation, image_size: int) -> np.ndarray:
    """(H, W) int map: landmark k at its nearest pixel, background N elsewhere.

    Invisible landmarks are left as background. A visible landmark outside the
    image raises DataError; two landmarks on one pixel raise LabelCollisionError.
    """
    n = annotation.count
    labels = np.full((image_size, image_size), n, dtype=np.int64)
    px = pixel_of(annotation.xy)
    for k in np.flatnonzero(annotation.visible):
        c, r = px[k]
        if not (0 <= c < image_size and 0 <= r < image_size):
            raise DataError(f"{annotation.image}: landmark {k} at {tuple(annotation.xy[k])} is outside the image")
        if labels[r, c] != n:
            raise LabelCollisionError(
                f"{annotation.image}: landmarks {labels[r, c]} and {k} share pixel ({c}, {r})")
        labels[r, c] = k
    return labels
