"""Binary checkpoint container.

Layout (little-endian)::

    b"PCDC" | u16 version | u32 header length | header JSON | tensor bytes...

The header echoes the model config (including the tree name) and lists each
tensor's name, dtype and shape in storage order. Batch-norm running stats
are stored under ``bn/<layer>/mean`` and ``bn/<layer>/var``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, DataError, TreeMismatchError
from .model import ModelConfig, PCDModel, build_from_config

MAGIC = b"PCDC"
VERSION = 1


def _tensors(model: PCDModel):
    for name, p in model.params.items():
        yield name, p.data
    for name, st in model.bn.items():
        yield f"bn/{name}/mean", st.running_mean
        yield f"bn/{name}/var", st.running_var


def save_checkpoint(model: PCDModel, path, extra: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in _tensors(model):
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = {"format": "pcdc", "tree": model.tree.name, "config": model.config.to_dict(),
              "tensors": entries, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(4) != MAGIC:
        raise DataError(f"{path}: not a PCDC checkpoint")
    raw = f.read(6)
    if len(raw) != 6:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", raw)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        return json.loads(f.read(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None


def load_checkpoint(path, expect_tree: str | None = None) -> PCDModel:
    """Rebuild the model described by the header and fill in every tensor.

    Raises :class:`TreeMismatchError` when ``expect_tree`` differs from the
    stored tree and :class:`DataError` on any shape or size inconsistency.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    with open(path, "rb") as f:
        header = _read_header(f, path)
        if expect_tree is not None and header["tree"] != expect_tree:
            raise TreeMismatchError(
                f"checkpoint was trained for tree {header['tree']!r} but the data uses {expect_tree!r}")
        try:
            model = build_from_config(ModelConfig.from_dict(header["config"]))
        except (TypeError, KeyError, ConfigurationError) as exc:
            raise DataError(f"{path}: invalid model config ({exc})") from None
        expected = dict(_tensors(model))
        stored = {e["name"] for e in header["tensors"]}
        if stored != set(expected):
            missing = sorted(set(expected) - stored)[:5]
            raise DataError(f"{path}: tensor table does not match the model (missing e.g. {missing})")
        for e in header["tensors"]:
            dt = np.dtype(e["dtype"])
            shape = tuple(e["shape"])
            if shape != expected[e["name"]].shape:
                raise DataError(f"{path}: {e['name']} has shape {shape}, model expects {expected[e['name']].shape}")
            n = int(np.prod(shape)) * dt.itemsize
            buf = f.read(n)
            if len(buf) != n:
                raise DataError(f"{path}: truncated tensor data at {e['name']}")
            arr = np.frombuffer(buf, dtype=dt).reshape(shape)
            _assign(model, e["name"], arr)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after tensor table")
    return model


def _assign(model: PCDModel, name: str, arr: np.ndarray) -> None:
    if name.startswith("bn/"):
        _, layer, which = name.split("/")
        st = model.bn[layer]
        if which == "mean":
            st.running_mean = arr.astype(st.running_mean.dtype)
        else:
            st.running_var = arr.astype(st.running_var.dtype)
    else:
        model.params[name].data[...] = arr
