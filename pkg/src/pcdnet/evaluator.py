"""Heatmap decoding and face-alignment metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError
from .net.model import PCDModel, forward
from .tensor_core import channel_softmax

log = logging.getLogger(__name__)

POSE_SCALE = np.array([120.0, 90.0, 90.0])  # degrees per unit of normalized yaw/pitch/roll


@dataclass
class EvalProtocol:
    normalizer: str = "bbox"  # bbox | interocular
    failure_threshold: float = 0.10
    tau: float = 0.3
    grid: np.ndarray = field(default_factory=lambda: np.round(np.linspace(0.0, 0.15, 151), 6))
    pose_tolerance: float = 15.0

    def __post_init__(self):
        if self.normalizer not in ("bbox", "interocular"):
            raise ConfigurationError(f"unknown normalizer {self.normalizer!r}")
        if not 0 < self.tau < 1:
            raise ConfigurationError("visibility threshold must lie in (0, 1)")
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0):
            raise ConfigurationError("CED grid must be strictly increasing")
        self.grid = g


def decode_heatmaps(probs: np.ndarray, tau: float = 0.3) -> np.ndarray:
    """(N+1, H, W) probabilities -> (N, 4) rows of x, y, confidence, visible.

    The background channel (last) is not decoded. Ties go to the first pixel
    in row-major order.
    """
    p = np.asarray(probs)
    n = p.shape[0] - 1
    H, W = p.shape[1:]
    flat = p[:n].reshape(n, H * W)
    idx = flat.argmax(axis=1)
    conf = flat[np.arange(n), idx]
    out = np.empty((n, 4))
    out[:, 0] = idx % W
    out[:, 1] = idx // W
    out[:, 2] = conf
    out[:, 3] = conf >= tau
    return out


def normalizer_of(ann, protocol: EvalProtocol, tree=None) -> float:
    if protocol.normalizer == "bbox":
        d = float(np.sqrt(ann.bbox[2] * ann.bbox[3]))
    else:
        if tree is None:
            raise ConfigurationError("interocular normalization needs the landmark tree")
        a, b = (tree.index(n) for n in tree.eye_corners)
        d = float(np.linalg.norm(ann.xy[a] - ann.xy[b]))
    if not d > 0:
        raise DataError(f"{ann.image}: zero {protocol.normalizer} normalizer")
    return d


def nme(pred_xy: np.ndarray, ann, protocol: Optional[EvalProtocol] = None, tree=None) -> Optional[float]:
    """Mean error over ground-truth-visible landmarks divided by the normalizer.

    Returns None (and logs a warning) when the sample has no visible landmark.
    """
    protocol = protocol or EvalProtocol()
    vis = ann.visible
    if not vis.any():
        log.warning("%s: no visible landmarks, excluded from NME", ann.image)
        return None
    d = normalizer_of(ann, protocol, tree)
    err = np.linalg.norm(np.asarray(pred_xy, dtype=np.float64)[vis] - ann.xy[vis], axis=1)
    return float(err.mean() / d)


def ced(errors, grid) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ConfigurationError("CED of an empty error list")
    return (e[None, :] <= np.asarray(grid)[:, None]).mean(axis=1)


def failure_rate(errors, t: float = 0.10) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ConfigurationError("failure rate of an empty error list")
    return float(np.mean(e > t))


def pose_fraction(pose_errors_deg, tol: float = 15.0) -> float:
    """Fraction of samples whose worst-axis absolute pose error is within ``tol`` degrees."""
    e = np.abs(np.asarray(pose_errors_deg, dtype=np.float64)).reshape(-1, 3)
    if e.shape[0] == 0:
        raise ConfigurationError("pose fraction of an empty list")
    return float(np.mean(e.max(axis=1) <= tol))


def occlusion_pr(pred_vis, gt_vis, taus=None) -> list:
    """Precision/recall of occlusion detection over a threshold sweep.

    The occlusion score is ``1 - predicted visibility``; a landmark is
    predicted occluded when its score is at least tau. Thresholds with no
    predicted positives have undefined precision and are skipped.
    Returns (tau, precision, recall) tuples.
    """
    s = 1.0 - np.asarray(pred_vis, dtype=np.float64).ravel()
    occ = np.asarray(gt_vis).ravel() < 0.5
    if s.shape != occ.shape:
        raise ConfigurationError("occlusion_pr: prediction and ground truth lengths differ")
    if not occ.any():
        raise DataError("occlusion_pr: no occluded landmarks in ground truth; recall undefined")
    taus = np.round(np.linspace(0, 1, 101), 6) if taus is None else np.asarray(taus)
    out = []
    for t in taus:
        pred = s >= t
        tp = int(np.sum(pred & occ))
        fp = int(np.sum(pred & ~occ))
        if tp + fp == 0:
            continue
        out.append((float(t), tp / (tp + fp), tp / int(occ.sum())))
    return out


def visibility_f1(conf, gt_vis, tau: float) -> float:
    """F1 of the rule ``visible iff confidence >= tau`` (visible is the positive class)."""
    pred = np.asarray(conf, dtype=np.float64).ravel() >= tau
    gt = np.asarray(gt_vis).ravel() >= 0.5
    tp = int(np.sum(pred & gt))
    denom = int(pred.sum()) + int(gt.sum())
    return 2.0 * tp / denom if denom else 0.0


def calibrate_tau(conf, gt_vis, taus=None) -> tuple:
    """Pick the visibility threshold maximizing F1; ties go to the smallest tau.

    Returns (tau, f1).
    """
    taus = np.round(np.linspace(0.01, 0.99, 99), 6) if taus is None else np.asarray(taus, dtype=np.float64)
    scores = [visibility_f1(conf, gt_vis, t) for t in taus]
    k = int(np.argmax(scores))
    return float(taus[k]), float(scores[k])


def recall_at_precision(curve: list, target: float = 0.8) -> float:
    """Best recall reachable at precision >= target, interpolating linearly
    between consecutive sweep points that straddle the target."""
    best = 0.0
    for _, p, r in curve:
        if p >= target:
            best = max(best, r)
    for (_, p0, r0), (_, p1, r1) in zip(curve, curve[1:]):
        if (p0 - target) * (p1 - target) < 0:
            f = (target - p0) / (p1 - p0)
            best = max(best, r0 + f * (r1 - r0))
    return float(best)


# ---- model inference ---------------------------------------------------------


def to_input(images: np.ndarray, dtype) -> np.ndarray:
    """uint8 (B, 3, H, W) -> centred floats in [-0.5, 0.5]."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        return (x.astype(dtype) / 255.0 - 0.5).astype(dtype)
    return x.astype(dtype)


def predict(model: PCDModel, images: np.ndarray, stage: str = "coarse", batch: int = 32) -> tuple:
    """(probabilities (B, N+1, H, W), normalized pose (B, 3)) in eval mode."""
    probs, poses = [], []
    for i in range(0, len(images), batch):
        x = to_input(images[i : i + batch], model.dtype)
        out = forward(model, x, stage=stage, training=False)
        probs.append(channel_softmax(out.logits).data)
        poses.append(out.pose.data)
    return np.concatenate(probs), np.concatenate(poses)


def unflip_probs(probs: np.ndarray, flip_perm) -> np.ndarray:
    """Map probabilities predicted on mirrored images back to the original frame."""
    n = probs.shape[1] - 1
    perm = list(flip_perm) + [n]
    return probs[:, perm, :, ::-1]


def mirror_pose(pose: np.ndarray) -> np.ndarray:
    return pose * np.array([-1.0, 1.0, -1.0], dtype=pose.dtype)


def flip_tta(model: PCDModel, images: np.ndarray, stage: str = "coarse", batch: int = 32) -> tuple:
    """Average predictions for each image and its horizontal mirror."""
    imgs = np.asarray(images)
    p1, q1 = predict(model, imgs, stage, batch)
    p2, q2 = predict(model, np.ascontiguousarray(imgs[..., ::-1]), stage, batch)
    probs = 0.5 * (p1 + unflip_probs(p2, model.tree.flip_perm))
    pose = 0.5 * (q1 + mirror_pose(q2))
    return probs, pose


@dataclass
class EvalReport:
    errors: list
    nme_mean: float
    failure_rate: float
    ced: np.ndarray
    grid: np.ndarray
    pose_frac_15deg: Optional[float] = None
    recall_at_p80: Optional[float] = None
    excluded: int = 0

    def summary(self) -> dict:
        d = {"nme_mean": self.nme_mean, "failure_rate": self.failure_rate, "count": len(self.errors),
             "excluded": self.excluded}
        if self.pose_frac_15deg is not None:
            d["pose_frac_15deg"] = self.pose_frac_15deg
        if self.recall_at_p80 is not None:
            d["recall_at_p80"] = self.recall_at_p80
        return d


def report_from_predictions(probs, poses, annotations, tree, protocol: Optional[EvalProtocol] = None) -> EvalReport:
    protocol = protocol or EvalProtocol()
    errors, pose_err, pv, gv = [], [], [], []
    excluded = 0
    for b, ann in enumerate(annotations):
        dec = decode_heatmaps(probs[b], protocol.tau)
        e = nme(dec[:, :2], ann, protocol, tree)
        if e is None:
            excluded += 1
        else:
            errors.append(e)
        if ann.pose is not None:
            pose_err.append(poses[b] * POSE_SCALE - np.asarray(ann.pose))
        pv.append(dec[:, 2])
        gv.append(ann.visible)
    if not errors:
        raise DataError("no sample has a visible landmark")
    recall = None
    gv_all = np.concatenate(gv)
    if (~gv_all).any():
        recall = recall_at_precision(occlusion_pr(np.concatenate(pv), gv_all))
    return EvalReport(
        errors=errors,
        nme_mean=float(np.mean(errors)),
        failure_rate=failure_rate(errors, protocol.failure_threshold),
        ced=ced(errors, protocol.grid),
        grid=protocol.grid,
        pose_frac_15deg=pose_fraction(pose_err, protocol.pose_tolerance) if pose_err else None,
        recall_at_p80=recall,
        excluded=excluded,
    )


def evaluate(model: PCDModel, samples, protocol: Optional[EvalProtocol] = None, tta: bool = False,
             stage: str = "coarse") -> EvalReport:
    if samples.tree != model.tree.name:
        from .errors import TreeMismatchError

        raise TreeMismatchError(f"model tree {model.tree.name!r} vs data tree {samples.tree!r}")
    fn = flip_tta if tta else predict
    probs, poses = fn(model, samples.images, stage)
    return report_from_predictions(probs, poses, samples.annotations, model.tree, protocol)


def per_sample_nme(model: PCDModel, samples, stage: str = "coarse", protocol: Optional[EvalProtocol] = None) -> np.ndarray:
    """NME per sample (NaN where a sample has no visible landmark)."""
    protocol = protocol or EvalProtocol()
    probs, _ = predict(model, samples.images, stage)
    out = np.full(len(samples), np.nan)
    for b, ann in enumerate(samples.annotations):
        e = nme(decode_heatmaps(probs[b], protocol.tau)[:, :2], ann, protocol, model.tree)
        if e is not None:
            out[b] = e
    return out


def ced_table(report: EvalReport) -> str:
    rows = ["threshold,fraction"] + [f"{t:.3f},{f:.6f}" for t, f in zip(report.grid, report.ced)]
    return "\n".join(rows) + "\n"


def read_ced_table(text: str) -> tuple:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "threshold,fraction":
        raise DataError("CED table must start with 'threshold,fraction'")
    vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return vals[:, 0], vals[:, 1]
