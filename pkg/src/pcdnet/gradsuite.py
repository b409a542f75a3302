"""Finite-difference checks for every differentiable op and the full model.

Shared by the ``gradcheck`` command and the test suite. Everything runs in
float64 with central differences at eps 1e-5.
"""
from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .losses import build_mask, mask_softmax_loss, pose_euclidean_loss, visibility_weighted_loss
from .net.model import PCDModel, build_model, condition_on_pose, forward, message_pass
from .net.trees import AFLW21, DendriticTree

EPS = 1e-5
TOL = 1e-4


def _away_from_zero(r, shape):
    # keep inputs clear of ReLU kinks so differences stay one-sided-free
    v = r.standard_normal(shape)
    return np.where(np.abs(v) < 0.05, np.sign(v + 1e-12) * 0.5, v)


def _pair_tree() -> DendriticTree:
    return DendriticTree("chain3", ("a", "b", "c"), ((0, 1), (1, 2)), 0, (0, 1, 2), ()).validate()


def _cases(r: np.random.Generator):
    """name -> (fn, input arrays)."""
    T = tc.Tensor
    st_train = tc.BatchNormState(r.standard_normal(3), r.uniform(0.5, 2.0, 3))
    st_eval = tc.BatchNormState(r.standard_normal(3), r.uniform(0.5, 2.0, 3))
    labels = r.integers(0, 4, (2, 5, 5))
    mask = r.random((2, 5, 5)) < 0.5
    mask[:, 0, 0] = True
    pose_target = r.uniform(-1, 1, (2, 3))
    vis = (r.random(8) < 0.6).astype(float)
    tree = _pair_tree()
    cond_model = build_model(AFLW21, 32, seed=0, dtype="float64")
    C = cond_model.config.backbone.out_channels
    mix = r.standard_normal((4, 3))
    proj = r.standard_normal((2, 3, 3, 3))
    perm = tc.tile_layout(2, 3, 2, 1)
    return {
        "add": (tc.add, [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
        "multiply": (tc.multiply, [r.standard_normal((2, 3, 3)), r.standard_normal((2, 3, 3))]),
        "scale": (lambda x: tc.scale(x, -1.7), [r.standard_normal((2, 3))]),
        "sum_all": (tc.sum_all, [r.standard_normal((2, 3))]),
        "weighted_sum": (lambda x: tc.weighted_sum(x, proj), [r.standard_normal((2, 3, 3, 3))]),
        "conv2d": (lambda x, w, b: tc.conv2d(x, w, b, stride=2, pad=1),
                   [r.standard_normal((2, 3, 6, 5)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)]),
        "conv2d_grouped": (lambda x, w, b: tc.conv2d(x, w, b, pad=1, groups=2),
                           [r.standard_normal((1, 4, 5, 5)), r.standard_normal((6, 2, 3, 3)), r.standard_normal(6)]),
        "conv2d_depthwise": (lambda x, w: tc.conv2d(x, w, pad=2, groups=3),
                             [r.standard_normal((2, 3, 6, 6)), r.standard_normal((3, 1, 5, 5))]),
        "transposed_conv2d": (lambda x, w, b: tc.transposed_conv2d(x, w, b, stride=2, pad=1),
                              [r.standard_normal((2, 3, 4, 3)), r.standard_normal((3, 2, 4, 4)),
                               r.standard_normal(2)]),
        "transposed_conv2d_tiled": (lambda x, w, b: tc.transposed_conv2d(x, w, b, stride=2, groups=3),
                                    [r.standard_normal((2, 6, 3, 3)), r.standard_normal((6, 2, 2, 2)),
                                     r.standard_normal(6)]),
        "tile_expand": (lambda x, w, b: tc.tile_expand(x, w, b, stride=2, groups=2),
                        [r.standard_normal((2, 4, 3, 2)), r.standard_normal((4, 3, 2, 2)), r.standard_normal(6)]),
        "spatial_permute": (lambda x: tc.spatial_permute(x, perm, (4, 6)), [r.standard_normal((2, 3, 8, 3))]),
        "relu": (tc.relu, [_away_from_zero(r, (2, 3, 4, 4))]),
        "max_pool2d": (tc.max_pool2d, [r.permutation(96).reshape(2, 3, 4, 4) * 0.1]),
        "batch_norm_train": (lambda x, g, b: tc.batch_norm(x, g, b, st_train, True),
                             [r.standard_normal((3, 3, 3, 3)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)]),
        "batch_norm_eval": (lambda x, g, b: tc.batch_norm(x, g, b, st_eval, False),
                            [r.standard_normal((3, 3, 3, 3)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)]),
        "relu_batch_norm": (lambda x, g, b: tc.relu_batch_norm(x, g, b, st_train, True),
                            [_away_from_zero(r, (3, 3, 3, 3)), r.uniform(0.5, 1.5, 3), r.standard_normal(3)]),
        "channel_softmax": (tc.channel_softmax, [r.standard_normal((2, 4, 3, 3))]),
        "global_avg_pool": (tc.global_avg_pool, [r.standard_normal((2, 3, 4, 4))]),
        "linear": (tc.linear, [r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)]),
        "concat_channels": (lambda a, b: tc.concat_channels([a, b]),
                            [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 3, 3, 3))]),
        "slice_channels": (lambda a: tc.slice_channels(a, 1, 3), [r.standard_normal((2, 4, 3, 3))]),
        "gather_channels": (lambda a: tc.gather_channels(a, [2, 0, 2, 1]), [r.standard_normal((2, 3, 3, 3))]),
        "channel_mix": (lambda a: tc.channel_mix(a, mix), [r.standard_normal((2, 3, 3, 3))]),
        "mask_softmax_loss": (lambda x: mask_softmax_loss(x, labels, mask), [r.standard_normal((2, 4, 5, 5))]),
        "pose_euclidean_loss": (lambda p: pose_euclidean_loss(p, pose_target), [r.standard_normal((2, 3))]),
        "visibility_weighted_loss": (lambda p: visibility_weighted_loss(p, vis), [r.random(8)]),
        "message_pass": (lambda R, K: message_pass(R, tree, K),
                         [r.standard_normal((2, 3, 5, 5)), r.standard_normal((4, 1, 3, 3))]),
        "condition_on_pose": (lambda a, b: condition_on_pose(a, b, cond_model, training=True),
                              [r.standard_normal((2, C, 3, 3)), r.standard_normal((2, C, 3, 3))]),
    }


def op_reports(seed: int = 0) -> list:
    """One :class:`GradcheckReport` per differentiable op."""
    r = np.random.default_rng(seed)
    out = []
    for name, (fn, arrays) in _cases(r).items():
        inputs = [tc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out.append(tc.gradcheck(fn, inputs, eps=EPS, tol=TOL, name=name, seed=seed))
    return out


def perturb_defaults(m: PCDModel, seed: int) -> PCDModel:
    """Move every zero/one-initialized tensor off its default so no ReLU sits
    exactly on its kink and batch-norm state actually matters."""
    rng = np.random.default_rng(seed)
    for name, p in m.params.items():
        if name.endswith((".b", ".beta")) or name == "edge.kernels":
            p.data += rng.normal(0, 0.1, p.shape)
        elif name.endswith(".gamma"):
            p.data *= rng.uniform(0.5, 1.5, p.shape)
    for st in m.bn.values():
        st.running_mean = rng.normal(0, 0.2, st.running_mean.shape).astype(st.running_mean.dtype)
        st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape).astype(st.running_var.dtype)
    return m


def _random_labels(size: int, n: int, rng) -> np.ndarray:
    lab = np.full((size, size), n)
    lab.reshape(-1)[rng.choice(size * size, n, replace=False)] = np.arange(n)
    return lab


def model_report(seed: int = 0, count: int = 12, image_size: int = 32, overrides: dict | None = None):
    """Spot-check a full coarse forward/backward pass (keypoint plus pose loss)."""
    m = perturb_defaults(build_model(AFLW21, image_size, seed=seed, dtype="float64", **(overrides or {})), seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, image_size, image_size))
    labels = np.stack([_random_labels(image_size, m.tree.count, rng) for _ in range(2)])
    mask = np.stack([build_mask(lab, [seed, b]) for b, lab in enumerate(labels)])
    target = rng.uniform(-1, 1, (2, 3))

    def loss_fn():
        out = forward(m, x, training=True)
        return tc.add(mask_softmax_loss(out.logits, labels, mask), pose_euclidean_loss(out.pose, target))

    return tc.spot_check(loss_fn, list(m.params.values()), count=count, eps=EPS, tol=TOL, seed=seed,
                         name="coarse model")
