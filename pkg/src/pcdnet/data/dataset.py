"""In-memory sample sets built from manifests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, LabelCollisionError
from ..net.trees import get_tree
from .annotations import DatasetManifest, load_image
from .labels import rasterize_labels
from .synth import SynthConfig, synth_sample

log = logging.getLogger(__name__)


@dataclass
class SampleSet:
    images: np.ndarray  # (M, 3, H, W) uint8
    annotations: list
    tree: str
    image_size: int

    def __len__(self) -> int:
        return len(self.annotations)

    def subset(self, idx) -> "SampleSet":
        idx = list(idx)
        return SampleSet(self.images[idx], [self.annotations[i] for i in idx], self.tree, self.image_size)


def synth_manifest(cfg: SynthConfig, count: int, start: int = 0) -> DatasetManifest:
    records = [synth_sample(cfg, i)[1] for i in range(start, start + count)]
    return DatasetManifest(cfg.tree, cfg.image_size, records, cfg.to_dict())


def load_samples(manifest: DatasetManifest) -> SampleSet:
    """Load every image; records whose labels collide are skipped with a warning."""
    tree = get_tree(manifest.tree)
    size = manifest.image_size
    images, anns = [], []
    cfg = SynthConfig.from_dict(manifest.synth) if manifest.synth is not None else None
    for rec in manifest.records:
        rec.validate(count=tree.count)
        try:
            rasterize_labels(rec, size)
        except LabelCollisionError as exc:
            log.warning("skipping record: %s", exc)
            continue
        if cfg is not None and rec.image.startswith("synth:"):
            seed, index = (int(v) for v in rec.image.split(":")[1:])
            img, _ = synth_sample(cfg if cfg.seed == seed else cfg.with_seed(seed), index)
        else:
            img = load_image(rec.image, manifest)
        images.append(img)
        anns.append(rec)
    if not anns:
        raise DataError("manifest contains no usable records")
    return SampleSet(np.stack(images), anns, tree.name, size)
