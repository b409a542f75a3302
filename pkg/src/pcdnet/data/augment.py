"""Random crop, horizontal flip and in-plane rotation as one affine warp.

Pixel coordinates are (x = column, y = row) with y pointing down. A
rotation by ``angle`` degrees matches a change of roll by the same amount
under the synthetic generator's camera convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from ..errors import LabelCollisionError
from .annotations import LandmarkAnnotation
from .labels import pixel_of, rasterize_labels


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0  # crop side as a fraction of the image
    offset: tuple = (0.0, 0.0)  # crop corner (x, y) in pixels
    angle: float = 0.0  # degrees
    flip: bool = False

    @classmethod
    def sample(cls, seed, size: int, scale_range=(0.9, 1.0), max_angle: float = 20.0, flip_prob: float = 0.5,
               flip=None) -> "AugmentParams":
        rng = np.random.default_rng(seed)
        s = rng.uniform(*scale_range)
        room = (1 - s) * size
        offset = (rng.uniform(0, room), rng.uniform(0, room))
        angle = rng.uniform(-max_angle, max_angle)
        f = rng.random() < flip_prob
        return cls(s, offset, angle, bool(f if flip is None else flip))


def forward_matrix(p: AugmentParams, size: int) -> np.ndarray:
    """3x3 map from source pixel (x, y, 1) to augmented pixel."""
    crop = np.array([[1 / p.scale, 0, -p.offset[0] / p.scale], [0, 1 / p.scale, -p.offset[1] / p.scale], [0, 0, 1]])
    c = (size - 1) / 2
    t = np.deg2rad(p.angle)
    ct, st = np.cos(t), np.sin(t)
    rot = np.array([[ct, st, c - ct * c - st * c], [-st, ct, c + st * c - ct * c], [0, 0, 1]])
    A = rot @ crop
    if p.flip:
        A = np.array([[-1, 0, size - 1], [0, 1, 0], [0, 0, 1]]) @ A
    return A


def warp_image(image: np.ndarray, A: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(A)
    # scipy indexes (row, col) = (y, x)
    P = np.array([[0, 1], [1, 0]])
    M = P @ inv[:2, :2] @ P
    off = P @ inv[:2, 2]
    src = np.asarray(image, dtype=np.float64)
    out = np.stack([affine_transform(ch, M, offset=off, order=1, mode="nearest") for ch in src])
    if np.asarray(image).dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.astype(np.asarray(image).dtype)


def transform_annotation(ann: LandmarkAnnotation, p: AugmentParams, size: int, flip_perm) -> LandmarkAnnotation:
    A = forward_matrix(p, size)
    xy = ann.xy @ A[:2, :2].T + A[:2, 2]
    vis = ann.visible.copy()
    px = pixel_of(np.round(xy, 4))
    vis &= (px >= 0).all(axis=1) & (px <= size - 1).all(axis=1)
    lm = np.column_stack([xy, vis.astype(np.float64)])
    x, y, w, h = ann.bbox
    cx, cy = A[:2, :2] @ np.array([x + w / 2, y + h / 2]) + A[:2, 2]
    w, h = w / p.scale, h / p.scale
    pose = ann.pose
    if pose is not None:
        yaw, pitch, roll = pose
        roll = roll + p.angle
        if p.flip:
            yaw, roll = -yaw, -roll
        pose = (yaw, pitch, roll)
    if p.flip:
        lm = lm[list(flip_perm)]
    return LandmarkAnnotation(ann.image, (cx - w / 2, cy - h / 2, w, h), pose, lm)


def apply_augment(image: np.ndarray, ann: LandmarkAnnotation, p: AugmentParams, flip_perm) -> tuple:
    size = image.shape[-1]
    return warp_image(image, forward_matrix(p, size)), transform_annotation(ann, p, size, flip_perm)


def augment(image: np.ndarray, ann: LandmarkAnnotation, seed, flip_perm, **sample_kw) -> tuple:
    """Randomly crop (scale 0.9-1), flip (p=0.5) and rotate (+-20 deg) a sample.

    If the warped landmarks would collide on one pixel the sample is returned
    unchanged, so augmentation never drops a training record.
    """
    size = image.shape[-1]
    p = AugmentParams.sample(seed, size, **sample_kw)
    new_ann = transform_annotation(ann, p, size, flip_perm)
    try:
        rasterize_labels(new_ann, size)
    except LabelCollisionError:
        return image, ann
    return warp_image(image, forward_matrix(p, size)), new_ann
