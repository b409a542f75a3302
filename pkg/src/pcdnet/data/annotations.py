"""Landmark annotations and the line-delimited manifest format.

A manifest is a header line followed by one JSON object per record::

    {"tree": "aflw21", "image_size": 64, "count": 2, "synth": {...}}
    {"image": "synth:7:0", "bbox": [x, y, w, h], "pose": [yaw, pitch, roll], "landmarks": [[x, y, v], ...]}

Floats are stored rounded to four decimals, so reading back a written
manifest reproduces every record exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError

log = logging.getLogger(__name__)

PRECISION = 4


def _r(v) -> float:
    return round(float(v), PRECISION) + 0.0  # + 0.0 folds -0.0 into 0.0


@dataclass
class LandmarkAnnotation:
    image: str
    bbox: tuple  # (x, y, w, h) pixels
    pose: Optional[tuple]  # (yaw, pitch, roll) degrees, None when unlabeled
    landmarks: np.ndarray  # (N, 3): x, y, visible

    def __post_init__(self):
        self.bbox = tuple(_r(v) for v in self.bbox)
        if self.pose is not None:
            self.pose = tuple(_r(v) for v in self.pose)
        lm = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 3)
        lm = np.round(lm, PRECISION) + 0.0
        lm[:, 2] = (lm[:, 2] > 0.5).astype(np.float64)
        self.landmarks = lm

    @property
    def count(self) -> int:
        return self.landmarks.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.landmarks[:, :2]

    @property
    def visible(self) -> np.ndarray:
        return self.landmarks[:, 2] > 0.5

    def validate(self, image_size: Optional[int] = None, count: Optional[int] = None) -> "LandmarkAnnotation":
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise DataError(f"{self.image}: bounding box must have positive size, got {self.bbox}")
        if count is not None and self.count != count:
            raise DataError(f"{self.image}: {self.count} landmarks, tree expects {count}")
        if image_size is not None:
            px = np.floor(self.xy[self.visible] + 0.5)
            if px.size and (px.min() < 0 or px.max() > image_size - 1):
                raise DataError(f"{self.image}: visible landmark outside the {image_size}px image")
        return self

    def to_record(self) -> dict:
        return {
            "image": self.image,
            "bbox": [_r(v) for v in self.bbox],
            "pose": None if self.pose is None else [_r(v) for v in self.pose],
            "landmarks": [[_r(x), _r(y), int(v)] for x, y, v in self.landmarks],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LandmarkAnnotation":
        try:
            return cls(image=str(rec["image"]), bbox=tuple(rec["bbox"]),
                       pose=None if rec.get("pose") is None else tuple(rec["pose"]),
                       landmarks=np.asarray(rec["landmarks"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed annotation record: {exc}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandmarkAnnotation):
            return NotImplemented
        return self.to_record() == other.to_record()


@dataclass
class DatasetManifest:
    tree: str
    image_size: int
    records: list = field(default_factory=list)
    synth: Optional[dict] = None  # generator settings for synth: references
    root: Optional[Path] = None  # directory relative image paths resolve against

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def has_pose(self) -> bool:
        return all(r.pose is not None for r in self.records)

    def header(self) -> dict:
        h = {"tree": self.tree, "image_size": self.image_size, "count": self.count}
        if self.synth is not None:
            h["synth"] = self.synth
        return h

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(self.tree, self.image_size, [self.records[i] for i in indices], self.synth, self.root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(r.to_record(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        tree, size = header["tree"], int(header["image_size"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad header line ({exc})") from None
    records = []
    for no, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{no}: {exc}") from None
        records.append(LandmarkAnnotation.from_record(rec))
    if "count" in header and int(header["count"]) != len(records):
        raise DataError(f"{path}: header says {header['count']} records, found {len(records)}")
    counts = {r.count for r in records}
    if len(counts) > 1:
        raise DataError(f"{path}: records disagree on landmark count {sorted(counts)}")
    return DatasetManifest(tree, size, records, header.get("synth"), path.parent)


def parse_synth_ref(ref: str) -> Optional[tuple]:
    """``synth:<seed>:<index>`` -> (seed, index); None for file paths."""
    if not ref.startswith("synth:"):
        return None
    parts = ref.split(":")
    if len(parts) != 3:
        raise DataError(f"bad synthetic image reference {ref!r}")
    try:
        return int(parts[1]), int(parts[2])
    except ValueError:
        raise DataError(f"bad synthetic image reference {ref!r}") from None


def load_image(ref: str, manifest: DatasetManifest) -> np.ndarray:
    """Return the (3, H, W) uint8 image a record refers to."""
    sref = parse_synth_ref(ref)
    if sref is not None:
        from .synth import SynthConfig, synth_sample

        if manifest.synth is None:
            raise DataError(f"{ref}: manifest has no synth settings")
        cfg = SynthConfig.from_dict(manifest.synth)
        if cfg.seed != sref[0]:
            cfg = cfg.with_seed(sref[0])
        img, _ = synth_sample(cfg, sref[1])
        return img
    from PIL import Image

    path = Path(ref)
    if not path.is_absolute() and manifest.root is not None:
        path = manifest.root / path
    if not path.exists():
        raise DataError(f"image {path} not found")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if arr.shape[:2] != (manifest.image_size, manifest.image_size):
        raise DataError(f"{path}: size {arr.shape[:2]} does not match manifest image size {manifest.image_size}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(np.asarray(img, dtype=np.uint8).transpose(1, 2, 0))).save(path)
