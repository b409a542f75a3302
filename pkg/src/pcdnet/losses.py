"""Mask-Softmax pixel classification, pose regression and visibility losses."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .tensor_core import Tensor
from .tensor_core.tensor import make_result

MIN_BACKGROUND = 16
NEIGHBOR_FRACTION = 0.5
BACKGROUND_FRACTION = 0.00025
VISIBLE_WEIGHT = 0.23
INVISIBLE_WEIGHT = 0.77


def neighbor_pool(labels: np.ndarray, background: int) -> np.ndarray:
    """In-bounds 4-neighbours of positive pixels, excluding the positives."""
    pos = labels != background
    nb = np.zeros_like(pos)
    nb[1:, :] |= pos[:-1, :]
    nb[:-1, :] |= pos[1:, :]
    nb[:, 1:] |= pos[:, :-1]
    nb[:, :-1] |= pos[:, 1:]
    return nb & ~pos


def mask_counts(labels: np.ndarray, background: int, min_bg: int = MIN_BACKGROUND) -> tuple:
    """(positives, neighbours kept, background kept) for a label map."""
    pos = int(np.count_nonzero(labels != background))
    nb = int(np.count_nonzero(neighbor_pool(labels, background)))
    rest = labels.size - pos - nb
    n_nb = int(np.floor(NEIGHBOR_FRACTION * nb))
    n_bg = min(rest, max(min_bg, int(np.floor(BACKGROUND_FRACTION * rest + 0.5))))
    return pos, n_nb, n_bg


def build_mask(labels: np.ndarray, seed, background: Optional[int] = None, min_bg: int = MIN_BACKGROUND) -> np.ndarray:
    """Sample the loss mask for one (H, W) label map.

    All positives are kept, half of their pooled 4-neighbourhood (floored) and
    ``max(min_bg, round(0.025% of the remaining background))`` background pixels,
    each drawn without replacement. Deterministic for a given seed.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ConfigurationError("build_mask expects an (H, W) label map")
    bg = int(labels.max()) if background is None else background
    rng = np.random.default_rng(seed)
    pos = labels != bg
    nb = neighbor_pool(labels, bg)
    _, n_nb, n_bg = mask_counts(labels, bg, min_bg)
    mask = pos.copy()
    flat = mask.reshape(-1)
    nb_idx = np.flatnonzero(nb)
    if n_nb:
        flat[rng.choice(nb_idx, size=n_nb, replace=False)] = True
    bg_idx = np.flatnonzero(~(pos | nb))
    if n_bg:
        flat[rng.choice(bg_idx, size=n_bg, replace=False)] = True
    return mask


def mask_softmax_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked pixel cross-entropy over (B, C, H, W) logits.

    Each image contributes the mean negative log-probability of its label over
    its masked pixels; the batch loss is the mean over images. Unmasked pixels
    get exactly zero gradient. (C, H, W) inputs are treated as a batch of one.
    """
    x = logits
    lab = np.asarray(labels)
    msk = np.asarray(mask, dtype=bool)
    if x.ndim == 3:
        lab, msk = lab[None], msk[None]
    B, C, H, W = x.shape if x.ndim == 4 else (1,) + x.shape
    if lab.shape != (B, H, W) or msk.shape != (B, H, W):
        raise ConfigurationError(f"mask_softmax_loss: labels {lab.shape} / mask {msk.shape} vs logits {x.shape}")
    counts = msk.reshape(B, -1).sum(axis=1)
    if np.any(counts == 0):
        raise ConfigurationError("mask_softmax_loss: empty mask")
    data = x.data.reshape(B, C, H * W)
    b_idx, p_idx = np.nonzero(msk.reshape(B, -1))
    z = data[b_idx, :, p_idx]  # (M, C)
    cls = lab.reshape(B, -1)[b_idx, p_idx]
    if cls.min() < 0 or cls.max() >= C:
        raise ConfigurationError("mask_softmax_loss: label outside channel range")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(z.shape[0]), cls]
    w = 1.0 / (B * counts[b_idx])  # per-image mean, then batch mean
    loss = np.asarray(np.sum(w * nll), dtype=x.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(p.shape[0]), cls] -= 1.0
        p *= (g * w)[:, None]
        gx = np.zeros((B, C, H * W), dtype=x.dtype)
        gx[b_idx, :, p_idx] = p
        return (gx.reshape(x.shape),)

    return make_result(loss, (x,), backward, "mask_softmax_loss")


def full_mask(labels: np.ndarray) -> np.ndarray:
    """Every pixel selected: the plain-softmax baseline."""
    return np.ones(np.shape(labels), dtype=bool)


def pose_euclidean_loss(pred: Tensor, target) -> Tensor:
    """0.5 * ||pred - target||^2, averaged over the batch for (B, 3) inputs."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ConfigurationError(f"pose loss: target {t.shape} vs prediction {pred.shape}")
    n = pred.shape[0] if pred.ndim == 2 else 1
    diff = pred.data - t
    loss = np.asarray(0.5 * np.sum(diff * diff) / n, dtype=pred.dtype)

    def backward(g):
        return (g * diff / n,)

    return make_result(loss, (pred,), backward, "pose_euclidean_loss")


def visibility_weights(gt) -> np.ndarray:
    gt = np.asarray(gt)
    return np.where(gt >= 0.5, VISIBLE_WEIGHT, INVISIBLE_WEIGHT)


def visibility_weighted_loss(pred: Tensor, gt) -> Tensor:
    """sum_i w_i (p_i - g_i)^2 with w = 0.23 for visible and 0.77 for occluded points."""
    g_arr = np.asarray(gt, dtype=pred.dtype)
    if g_arr.shape != pred.shape:
        raise ConfigurationError(f"visibility loss: gt {g_arr.shape} vs prediction {pred.shape}")
    w = visibility_weights(g_arr)
    diff = pred.data - g_arr
    loss = np.asarray(np.sum(w * diff * diff), dtype=pred.dtype)

    def backward(g):
        return (g * 2.0 * w * diff,)

    return make_result(loss, (pred,), backward, "visibility_weighted_loss")
