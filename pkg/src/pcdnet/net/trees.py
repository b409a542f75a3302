"""Landmark trees for the 21-, 29- and 68-point configurations.

"left"/"right" in landmark names refer to the image side of a frontal face.
Every tree is rooted at the nose tip. ``split_from`` records, for trees other
than the 21-point base, which base landmark each node is carved out of during
network surgery.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class DendriticTree:
    name: str
    nodes: tuple
    edges: tuple  # undirected (i, j) index pairs
    root: int
    flip_perm: tuple
    eye_corners: tuple  # names of the outer eye corners
    split_from: Optional[dict] = field(default=None, compare=False, hash=False)

    @property
    def count(self) -> int:
        return len(self.nodes)

    def index(self, name: str) -> int:
        try:
            return self.nodes.index(name)
        except ValueError:
            raise ConfigurationError(f"tree {self.name!r} has no landmark {name!r}") from None

    def directed_edges(self) -> list:
        """Both orientations of every edge, as (source, destination) pairs."""
        out = []
        for i, j in self.edges:
            out.append((i, j))
            out.append((j, i))
        return out

    def neighbors(self, i: int) -> list:
        return [b for a, b in self.directed_edges() if a == i]

    def validate(self) -> "DendriticTree":
        n = self.count
        if len(set(self.nodes)) != n:
            raise ConfigurationError(f"{self.name}: duplicate landmark names")
        if not 0 <= self.root < n:
            raise ConfigurationError(f"{self.name}: root {self.root} missing")
        if len(self.edges) != n - 1:
            raise ConfigurationError(f"{self.name}: {len(self.edges)} edges for {n} nodes is not a tree")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ConfigurationError(f"{self.name}: bad edge ({i}, {j})")
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            a = queue.popleft()
            for b in self.neighbors(a):
                if b not in seen:
                    seen.add(b)
                    queue.append(b)
        if len(seen) != n:
            raise ConfigurationError(f"{self.name}: tree is disconnected")
        perm = np.asarray(self.flip_perm)
        if sorted(perm.tolist()) != list(range(n)) or not np.array_equal(perm[perm], np.arange(n)):
            raise ConfigurationError(f"{self.name}: flip permutation is not an involution")
        for name in self.eye_corners:
            self.index(name)
        if self.split_from is not None:
            missing = [t for t in self.nodes if t not in self.split_from]
            if missing:
                raise ConfigurationError(f"{self.name}: unmapped target nodes {missing}")
        return self


def mirror_name(name: str) -> str:
    swap = {"left": "right", "right": "left"}
    return "_".join(swap.get(tok, tok) for tok in name.split("_"))


def _build(name, nodes, edges, root, eye_corners, flip_perm=None, split_from=None) -> DendriticTree:
    idx = {n: i for i, n in enumerate(nodes)}
    if flip_perm is None:
        flip_perm = [idx[mirror_name(n)] for n in nodes]
    return DendriticTree(
        name=name,
        nodes=tuple(nodes),
        edges=tuple((idx[a], idx[b]) for a, b in edges),
        root=idx[root],
        flip_perm=tuple(flip_perm),
        eye_corners=tuple(eye_corners),
        split_from=split_from,
    ).validate()


def _with_mirror(edges):
    mirrored = [(mirror_name(a), mirror_name(b)) for a, b in edges]
    return list(edges) + [e for e in mirrored if e not in edges]


# ---- 21 points ----------------------------------------------------------------

AFLW21_NODES = [
    "left_brow_left", "left_brow_center", "left_brow_right",
    "right_brow_left", "right_brow_center", "right_brow_right",
    "left_eye_left", "left_eye_center", "left_eye_right",
    "right_eye_left", "right_eye_center", "right_eye_right",
    "left_ear", "nose_left", "nose_tip", "nose_right", "right_ear",
    "mouth_left", "mouth_center", "mouth_right", "chin",
]

AFLW21_EDGES = _with_mirror([
    ("nose_tip", "nose_left"),
    ("nose_tip", "mouth_center"),
    ("mouth_center", "mouth_left"),
    ("mouth_center", "chin"),
    ("nose_tip", "left_eye_right"),
    ("left_eye_right", "left_eye_center"),
    ("left_eye_center", "left_eye_left"),
    ("left_eye_center", "left_brow_center"),
    ("left_brow_center", "left_brow_left"),
    ("left_brow_center", "left_brow_right"),
    ("left_eye_left", "left_ear"),
])

# ---- 29 points ----------------------------------------------------------------

COFW29_NODES = [
    "left_brow_outer", "right_brow_outer", "left_brow_inner", "right_brow_inner",
    "left_brow_top", "right_brow_top", "left_brow_bottom", "right_brow_bottom",
    "left_eye_outer", "right_eye_outer", "left_eye_inner", "right_eye_inner",
    "left_eye_top", "right_eye_top", "left_eye_bottom", "right_eye_bottom",
    "left_pupil", "right_pupil", "nose_left", "nose_right", "nose_tip", "nose_bottom",
    "mouth_left", "mouth_right", "lip_upper_top", "lip_upper_bottom",
    "lip_lower_top", "lip_lower_bottom", "chin",
]

COFW29_EDGES = _with_mirror([
    ("nose_tip", "nose_left"),
    ("nose_tip", "nose_bottom"),
    ("nose_bottom", "lip_upper_top"),
    ("lip_upper_top", "lip_upper_bottom"),
    ("lip_upper_bottom", "lip_lower_top"),
    ("lip_lower_top", "lip_lower_bottom"),
    ("lip_lower_bottom", "chin"),
    ("lip_upper_bottom", "mouth_left"),
    ("nose_tip", "left_eye_inner"),
    ("left_eye_inner", "left_pupil"),
    ("left_pupil", "left_eye_top"),
    ("left_pupil", "left_eye_bottom"),
    ("left_pupil", "left_eye_outer"),
    ("left_eye_top", "left_brow_bottom"),
    ("left_brow_bottom", "left_brow_top"),
    ("left_brow_top", "left_brow_outer"),
    ("left_brow_top", "left_brow_inner"),
])

COFW29_SPLIT = {
    "left_brow_outer": "left_brow_left", "left_brow_inner": "left_brow_right",
    "left_brow_top": "left_brow_center", "left_brow_bottom": "left_brow_center",
    "left_eye_outer": "left_eye_left", "left_eye_inner": "left_eye_right",
    "left_eye_top": "left_eye_center", "left_eye_bottom": "left_eye_center", "left_pupil": "left_eye_center",
    "nose_left": "nose_left", "nose_tip": "nose_tip", "nose_bottom": "nose_tip",
    "mouth_left": "mouth_left",
    "lip_upper_top": "mouth_center", "lip_upper_bottom": "mouth_center",
    "lip_lower_top": "mouth_center", "lip_lower_bottom": "mouth_center",
    "chin": "chin",
}
COFW29_SPLIT.update({mirror_name(k): mirror_name(v) for k, v in list(COFW29_SPLIT.items())})

# ---- 68 points ----------------------------------------------------------------
# Standard 68-point ordering: jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.

W300_NODES = (
    [f"jaw_{i}" for i in range(17)]
    + [f"left_brow_{i}" for i in range(5)]
    + [f"right_brow_{i}" for i in range(5)]
    + ["nose_bridge_0", "nose_bridge_1", "nose_bridge_2", "nose_tip"]
    + [f"nose_base_{i}" for i in range(5)]
    + [f"left_eye_{i}" for i in range(6)]
    + [f"right_eye_{i}" for i in range(6)]
    + [f"mouth_outer_{i}" for i in range(12)]
    + [f"mouth_inner_{i}" for i in range(8)]
)


def _w300_flip() -> list:
    perm = list(range(68))

    def pair(a, b):
        perm[a], perm[b] = b, a

    for i in range(8):
        pair(i, 16 - i)
    for i in range(5):
        pair(17 + i, 26 - i)
    pair(31, 35)
    pair(32, 34)
    for a, b in ((36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)):
        pair(a, b)
    for a, b in ((48, 54), (49, 53), (50, 52), (55, 59), (56, 58), (60, 64), (61, 63), (65, 67)):
        pair(a, b)
    return perm


def _w300_edges() -> list:
    n = W300_NODES
    e = [(30, 29), (29, 28), (28, 27), (30, 33), (33, 32), (32, 31), (33, 34), (34, 35)]
    e += [(27, 39), (39, 38), (38, 37), (37, 36), (39, 40), (40, 41)]
    e += [(27, 42), (42, 43), (43, 44), (44, 45), (42, 47), (47, 46)]
    e += [(27, 21), (21, 20), (20, 19), (19, 18), (18, 17)]
    e += [(27, 22), (22, 23), (23, 24), (24, 25), (25, 26)]
    e += [(33, 51), (51, 50), (50, 49), (49, 48), (48, 59), (59, 58), (58, 57)]
    e += [(51, 52), (52, 53), (53, 54), (54, 55), (55, 56)]
    e += [(51, 62), (62, 61), (61, 60), (62, 63), (63, 64), (57, 66), (66, 65), (66, 67)]
    e += [(57, 8)] + [(i + 1, i) for i in range(8)] + [(i - 1, i) for i in range(9, 17)]
    return [(n[a], n[b]) for a, b in e]


def _w300_split() -> dict:
    n = W300_NODES
    src = {}
    for i in range(17):
        src[n[i]] = "left_ear" if i <= 4 else ("right_ear" if i >= 12 else "chin")
    src.update({n[17]: "left_brow_left", n[21]: "left_brow_right", n[22]: "right_brow_left", n[26]: "right_brow_right"})
    for i in (18, 19, 20):
        src[n[i]] = "left_brow_center"
    for i in (23, 24, 25):
        src[n[i]] = "right_brow_center"
    for i in range(27, 31):
        src[n[i]] = "nose_tip"
    src.update({n[31]: "nose_left", n[32]: "nose_left", n[33]: "nose_tip", n[34]: "nose_right", n[35]: "nose_right"})
    src.update({n[36]: "left_eye_left", n[39]: "left_eye_right", n[42]: "right_eye_left", n[45]: "right_eye_right"})
    for i in (37, 38, 40, 41):
        src[n[i]] = "left_eye_center"
    for i in (43, 44, 46, 47):
        src[n[i]] = "right_eye_center"
    for i in range(48, 68):
        src[n[i]] = "mouth_center"
    src.update({n[48]: "mouth_left", n[60]: "mouth_left", n[54]: "mouth_right", n[64]: "mouth_right"})
    return src


AFLW21 = _build("aflw21", AFLW21_NODES, AFLW21_EDGES, "nose_tip", ("left_eye_left", "right_eye_right"))
COFW29 = _build("cofw29", COFW29_NODES, COFW29_EDGES, "nose_tip", ("left_eye_outer", "right_eye_outer"),
                split_from=COFW29_SPLIT)
W300_68 = _build("300w68", W300_NODES, _w300_edges(), "nose_tip", ("left_eye_0", "right_eye_3"),
                 flip_perm=_w300_flip(), split_from=_w300_split())

TREES = {t.name: t for t in (AFLW21, COFW29, W300_68)}
_ALIASES = {"21": "aflw21", "29": "cofw29", "68": "300w68", "aflw": "aflw21", "cofw": "cofw29", "300w": "300w68"}


def get_tree(name) -> DendriticTree:
    key = _ALIASES.get(str(name).lower(), str(name).lower())
    if key not in TREES:
        raise ConfigurationError(f"unknown tree {name!r}; choose from {sorted(TREES)}")
    return TREES[key]
