"""Retarget a trained model to a different landmark tree.

The last two deconvolution stages of every branch trunk are widened
4x. Weights for the new channels are drawn fresh, and the squeeze weights
that read them start at zero, so the widened model computes exactly what
the source model did. Batch-norm statistics travel with their channels.
Each target landmark then gets its own final 1x1 head on the pre-final
features of the trunk it was split from.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from ..errors import ConfigurationError
from .model import PCDModel, build_from_config
from .trees import DendriticTree


def _blocks(arr: np.ndarray, axis: int, size: int, picks) -> np.ndarray:
    """Concatenate the ``size``-wide blocks ``picks`` of ``arr`` along ``axis``."""
    return np.concatenate([np.take(arr, range(t * size, (t + 1) * size), axis=axis) for t in picks], axis=axis)


def _embed(new: np.ndarray, old: np.ndarray, axis: int, old_size: int, new_size: int, zero_rest: bool):
    """Write per-group blocks of ``old`` (width old_size) into the leading part
    of each group of ``new`` (width new_size) along ``axis``."""
    groups = old.shape[axis] // old_size
    out = new.copy()
    for g in range(groups):
        dst = [slice(None)] * new.ndim
        src = [slice(None)] * old.ndim
        dst[axis] = slice(g * new_size, g * new_size + old_size)
        src[axis] = slice(g * old_size, (g + 1) * old_size)
        out[tuple(dst)] = old[tuple(src)]
        if zero_rest and new_size > old_size:
            dst[axis] = slice(g * new_size + old_size, (g + 1) * new_size)
            out[tuple(dst)] = 0
    return out


def network_surgery(model: PCDModel, target_tree: DendriticTree, split_map: Optional[dict] = None) -> PCDModel:
    """Return a new model for ``target_tree`` whose outputs are carved from ``model``.

    ``split_map`` maps every target landmark name to a source landmark name
    and defaults to ``target_tree.split_from`` (or the identity when the trees
    coincide). Any fine stage is dropped and must be retrained.
    """
    source = model.tree
    if split_map is None:
        if target_tree.split_from is not None and target_tree.name != source.name:
            split_map = target_tree.split_from
        elif target_tree.nodes == source.nodes:
            split_map = {n: n for n in target_tree.nodes}
        else:
            raise ConfigurationError(f"no split map from {source.name} to {target_tree.name}")
    target_tree.validate()
    unmapped = [t for t in target_tree.nodes if t not in split_map]
    if unmapped:
        raise ConfigurationError(f"surgery: unmapped target landmarks {unmapped}")
    bad = [f"{t}->{s}" for t, s in split_map.items() if t in target_tree.nodes and s not in source.nodes]
    if bad:
        raise ConfigurationError(f"surgery: split map names unknown source landmarks {bad}")

    cfg = model.config
    src_heads = list(cfg.head_index) if cfg.head_index is not None else list(range(model.num_outputs))
    # source output index feeding each target output; background stays background
    src_out = [source.index(split_map[t]) for t in target_tree.nodes] + [source.count]
    trunk_of = [src_heads[o] for o in src_out]
    kept = sorted(set(trunk_of))
    renumber = {t: i for i, t in enumerate(kept)}

    new_cfg = replace(cfg, tree=target_tree.name, head_index=tuple(renumber[t] for t in trunk_of),
                      widened=True, fine_stage=False)
    new = build_from_config(new_cfg, target_tree)

    old_br = cfg.effective_branch()
    new_br = new_cfg.effective_branch()
    for name, p in model.params.items():
        if name.startswith(("pose.", "kp.")):
            new.params[name].data[...] = p.data
    for name, st in model.bn.items():
        if name.startswith(("pose.", "kp.")):
            new.bn[name] = replace(st, running_mean=st.running_mean.copy(), running_var=st.running_var.copy())

    n_stages = len(old_br.deconv_channels)
    for s in range(1, n_stages + 1):
        d_old, d_new = old_br.deconv_channels[s - 1], new_br.deconv_channels[s - 1]
        q = old_br.squeeze_channels[s - 1]
        q_prev = old_br.squeeze_channels[s - 2] if s > 1 else None
        tw = model.params[f"branch.t{s}.w"].data
        tb = model.params[f"branch.t{s}.b"].data
        if s == 1:
            tw = _blocks(tw, 1, d_old, kept)
        else:
            tw = _blocks(tw, 0, q_prev, kept)
        tb = _blocks(tb, 0, d_old, kept)
        new_tw, new_tb = new.params[f"branch.t{s}.w"], new.params[f"branch.t{s}.b"]
        if s == 1:
            new_tw.data[...] = _embed(new_tw.data, tw, 1, d_old, d_new, zero_rest=False)
        else:
            new_tw.data[...] = _embed_out(new_tw.data, tw, d_old)
        new_tb.data[...] = _embed(new_tb.data, tb, 0, d_old, d_new, zero_rest=True)

        sw = _blocks(model.params[f"branch.s{s}.w"].data, 0, q, kept)
        new_sw = new.params[f"branch.s{s}.w"]
        new_sw.data[...] = _embed(new_sw.data, sw, 1, d_old, d_new, zero_rest=True)
        new.params[f"branch.s{s}.b"].data[...] = _blocks(model.params[f"branch.s{s}.b"].data, 0, q, kept)
        _copy_bn(model, new, f"branch.t{s}.bn", d_old, d_new, kept)
        _copy_bn(model, new, f"branch.s{s}.bn", q, q, kept)

    new.params["branch.final.w"].data[...] = model.params["branch.final.w"].data[src_out]
    new.params["branch.final.b"].data[...] = model.params["branch.final.b"].data[src_out]

    src_edges = {e: i for i, e in enumerate(source.directed_edges())}
    old_k = model.params["edge.kernels"].data
    new_k = new.params["edge.kernels"]
    new_k.data[...] = 0
    for j, (a, b) in enumerate(target_tree.directed_edges()):
        key = (src_out[a], src_out[b])
        if key in src_edges:
            new_k.data[j] = old_k[src_edges[key]]
    return new


def _embed_out(new: np.ndarray, old: np.ndarray, d_old: int) -> np.ndarray:
    """Grouped deconv weight (T*q, d, k, k): keep fresh values for the added
    output channels of every group, copy the old ones in front."""
    out = new.copy()
    out[:, :d_old] = old
    return out


def _copy_bn(model: PCDModel, new: PCDModel, name: str, old_size: int, new_size: int, kept) -> None:
    """Carry a grouped batch-norm layer over; added channels keep their fresh defaults."""
    if name not in model.bn:
        return
    for part in ("gamma", "beta"):
        p = new.params[f"{name}.{part}"]
        p.data[...] = _embed(p.data, _blocks(model.params[f"{name}.{part}"].data, 0, old_size, kept), 0,
                             old_size, new_size, zero_rest=False)
    st, dst = model.bn[name], new.bn[name]
    mean = _embed(dst.running_mean, _blocks(st.running_mean, 0, old_size, kept), 0, old_size, new_size, False)
    var = _embed(dst.running_var, _blocks(st.running_var, 0, old_size, kept), 0, old_size, new_size, False)
    new.bn[name] = replace(st, running_mean=mean, running_var=var)
