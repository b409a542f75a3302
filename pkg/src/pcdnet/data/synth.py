"""Pose-parameterized synthetic faces.

A landmark template sits on the front of a head ellipsoid. Each sample draws
a pose, rotates the template, projects it with weak perspective and renders
a Lambert-shaded head (so shading carries pose information) with a coloured
blob on every visible landmark. Self-occlusion is a surface-normal test.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from ..errors import ConfigurationError
from ..net.trees import get_tree
from .annotations import LandmarkAnnotation

LIGHT = np.array([-0.4, 0.5, 1.0]) / np.linalg.norm([-0.4, 0.5, 1.0])


@dataclass(frozen=True)
class SynthConfig:
    tree: str = "aflw21"
    image_size: int = 64
    yaw_range: tuple = (-90.0, 90.0)
    pitch_range: tuple = (-30.0, 30.0)
    roll_range: tuple = (-30.0, 30.0)
    scale: float = 20.0  # pixels per template unit at 64 px
    scale_jitter: float = 0.1
    shift: float = 3.0  # max centre offset in pixels at 64 px
    blob_radius: float = 1.2
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi), lim in (("yaw", self.yaw_range, 120.0), ("pitch", self.pitch_range, 90.0),
                                    ("roll", self.roll_range, 90.0)):
            if not -lim <= lo <= hi <= lim:
                raise ConfigurationError(f"synth {name} range {(lo, hi)} outside +-{lim} degrees")
        if self.image_size < 16 or self.scale <= 0 or self.blob_radius <= 0 or self.noise < 0:
            raise ConfigurationError("synth: image_size, scale, blob_radius and noise must be positive")

    def with_seed(self, seed: int) -> "SynthConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("yaw_range", "pitch_range", "roll_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("yaw_range", "pitch_range", "roll_range"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad synth settings: {exc}") from None


@dataclass(frozen=True)
class Template:
    names: tuple
    points: np.ndarray  # (N, 3) template-frame positions
    normals: np.ndarray  # (N, 3) unit outward normals
    colors: np.ndarray  # (N, 3) blob colours
    axes: tuple  # ellipsoid semi-axes (a, b, c)


@lru_cache(maxsize=None)
def load_template(tree_name: str) -> Template:
    tree = get_tree(tree_name)
    text = resources.files("pcdnet.data").joinpath("templates").joinpath(f"{tree.name}.json").read_text()
    doc = json.loads(text)
    a, b, c = doc["ellipsoid"]
    by_name = {p["name"]: p for p in doc["points"]}
    pts, nrm, col = [], [], []
    for n in tree.nodes:
        p = by_name[n]
        x, y = p["x"], p["y"]
        z = c * np.sqrt(max(0.0, 1 - x * x / a**2 - y * y / b**2))
        g = np.array([x / a**2, y / b**2, z / c**2])
        pts.append([x, y, z + p["dz"]])
        nrm.append(g / np.linalg.norm(g))
        col.append(doc["palette"][p["group"]])
    return Template(tree.nodes, np.array(pts), np.array(nrm), np.array(col), (a, b, c))


def rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) Ry(yaw) Rx(pitch); degrees; y axis up, viewer on +z."""
    y, p, r = np.deg2rad([yaw, pitch, roll])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ ry @ rx


def project(points: np.ndarray, R: np.ndarray, scale: float, center: tuple) -> tuple:
    """Weak perspective: returns (pixel xy (N, 2), depth (N,))."""
    q = points @ R.T
    xy = np.stack([center[0] + scale * q[:, 0], center[1] - scale * q[:, 1]], axis=1)
    return xy, q[:, 2]


def visibility(template: Template, R: np.ndarray, xy: np.ndarray, depth: np.ndarray, size: int) -> np.ndarray:
    """Normal-facing test, frame test, then a depth test among points sharing a pixel."""
    vis = (template.normals @ R.T)[:, 2] >= 0
    px = np.floor(xy + 0.5).astype(int)
    vis &= (px >= 0).all(axis=1) & (px <= size - 1).all(axis=1)
    owner = {}
    for i in np.argsort(-depth, kind="stable"):
        if not vis[i]:
            continue
        key = (px[i, 0], px[i, 1])
        if key in owner:
            vis[i] = False
        else:
            owner[key] = i
    return vis


def silhouette_bbox(R: np.ndarray, axes: tuple, scale: float, center: tuple) -> tuple:
    M = R @ np.diag(np.square(axes)) @ R.T
    hw, hh = scale * np.sqrt(M[0, 0]), scale * np.sqrt(M[1, 1])
    return (center[0] - hw, center[1] - hh, 2 * hw, 2 * hh)


def render(template: Template, R: np.ndarray, scale: float, center: tuple, xy: np.ndarray, vis: np.ndarray,
           size: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    X = (u - center[0]) / scale
    Y = -(v - center[1]) / scale
    Q = R @ np.diag(1.0 / np.square(template.axes)) @ R.T
    B = Q[0, 2] * X + Q[1, 2] * Y
    C = Q[0, 0] * X * X + 2 * Q[0, 1] * X * Y + Q[1, 1] * Y * Y - 1
    disc = B * B - Q[2, 2] * C
    inside = disc > 0
    Z = (-B + np.sqrt(np.maximum(disc, 0))) / Q[2, 2]
    n = np.stack([Q[0, 0] * X + Q[0, 1] * Y + Q[0, 2] * Z,
                  Q[1, 0] * X + Q[1, 1] * Y + Q[1, 2] * Z,
                  Q[2, 0] * X + Q[2, 1] * Y + Q[2, 2] * Z])
    n /= np.linalg.norm(n, axis=0, keepdims=True) + 1e-12
    shade = 0.3 + 0.7 * np.clip(np.tensordot(LIGHT, n, axes=1), 0, None)

    bg_a = rng.uniform(0.05, 0.35, size=3)
    bg_b = rng.uniform(0.05, 0.35, size=3)
    t = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(t) * u + np.sin(t) * v) / size
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = bg_a[:, None, None] * (1 - ramp) + bg_b[:, None, None] * ramp
    skin = np.array([0.85, 0.66, 0.52]) + rng.uniform(-0.08, 0.08, size=3)
    alpha = np.clip(disc * 4.0, 0, 1) * inside
    img = img * (1 - alpha) + (skin[:, None, None] * shade) * alpha

    r2 = 2 * cfg.blob_radius ** 2
    for i in np.flatnonzero(vis):
        g = np.exp(-((u - xy[i, 0]) ** 2 + (v - xy[i, 1]) ** 2) / r2) * 0.9
        img = img * (1 - g) + template.colors[i][:, None, None] * g
    img = img + rng.normal(0, cfg.noise, size=img.shape)
    return np.clip(np.floor(img * 255 + 0.5), 0, 255).astype(np.uint8)


def synth_sample(cfg: SynthConfig, index: int, pose=None) -> tuple:
    """Deterministic (image (3, H, W) uint8, LandmarkAnnotation) for (cfg.seed, index).

    ``pose`` overrides the sampled (yaw, pitch, roll) in degrees.
    """
    rng = np.random.default_rng([cfg.seed, index])
    sampled = (rng.uniform(*cfg.yaw_range), rng.uniform(*cfg.pitch_range), rng.uniform(*cfg.roll_range))
    pose = tuple(round(float(a), 4) for a in (sampled if pose is None else pose))
    size = cfg.image_size
    unit = size / 64.0
    scale = cfg.scale * unit * (1 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    center = ((size - 1) / 2 + rng.uniform(-cfg.shift, cfg.shift) * unit,
              (size - 1) / 2 + rng.uniform(-cfg.shift, cfg.shift) * unit)
    tpl = load_template(cfg.tree)
    R = rotation(*pose)
    xy, depth = project(tpl.points, R, scale, center)
    xy = np.round(xy, 4)
    vis = visibility(tpl, R, xy, depth, size)
    img = render(tpl, R, scale, center, xy, vis, size, cfg, rng)
    ann = LandmarkAnnotation(
        image=f"synth:{cfg.seed}:{index}",
        bbox=silhouette_bbox(R, tpl.axes, scale, center),
        pose=pose,
        landmarks=np.column_stack([xy, vis.astype(np.float64)]),
    )
    return img, ann
