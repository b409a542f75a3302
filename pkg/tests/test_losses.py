import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdnet import tensor_core as tc
from pcdnet.errors import ConfigurationError
from pcdnet.losses import (
    build_mask,
    full_mask,
    mask_counts,
    mask_softmax_loss,
    neighbor_pool,
    pose_euclidean_loss,
    visibility_weighted_loss,
)


def random_labels(rng, size=64, n=21):
    lab = np.full((size, size), n)
    lab.reshape(-1)[rng.choice(size * size, n, replace=False)] = np.arange(n)
    return lab


def neighbors_oracle(lab, bg):
    H, W = lab.shape
    out = set()
    for y in range(H):
        for x in range(W):
            if lab[y, x] == bg:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W and lab[yy, xx] == bg:
                    out.add((yy, xx))
    return out


def test_neighbor_pool_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        lab = random_labels(rng, 12, 6)
        got = {tuple(p) for p in np.argwhere(neighbor_pool(lab, 6))}
        assert got == neighbors_oracle(lab, 6)


def test_mask_cardinalities_hundred_seeds():
    rng = np.random.default_rng(1)
    for seed in range(100):
        lab = random_labels(rng)
        mask = build_mask(lab, seed)
        nb_pool = neighbor_pool(lab, 21)
        pos = lab != 21
        rest = lab.size - pos.sum() - nb_pool.sum()
        assert np.all(mask[pos])
        assert (mask & nb_pool).sum() == nb_pool.sum() // 2
        assert (mask & ~pos & ~nb_pool).sum() == max(16, int(np.floor(0.00025 * rest + 0.5)))


def test_mask_counts_large_image():
    lab = np.full((256, 256), 3)
    lab[10, 10], lab[100, 100], lab[200, 50] = 0, 1, 2
    pos, n_nb, n_bg = mask_counts(lab, 3)
    rest = 256 * 256 - 3 - 12
    assert (pos, n_nb) == (3, 6)
    assert n_bg == max(16, int(np.floor(0.00025 * rest + 0.5)))  # 16
    lab = np.full((512, 512), 1)
    lab[5, 5] = 0
    assert mask_counts(lab, 1)[2] == int(np.floor(0.00025 * (512 * 512 - 1 - 4) + 0.5))


def test_mask_is_deterministic_and_seed_dependent():
    lab = random_labels(np.random.default_rng(2))
    np.testing.assert_array_equal(build_mask(lab, 7), build_mask(lab, 7))
    assert not np.array_equal(build_mask(lab, 7), build_mask(lab, 8))


def test_mask_background_capped_by_pool():
    lab2 = np.zeros((3, 3), int)
    lab2[0, 0] = 1
    m = build_mask(lab2, 0, background=1)
    # the lone background pixel is a neighbour (floor(0.5) = 0 kept) and nothing else remains
    assert m.sum() == 8
    assert not m[0, 0]


def test_mask_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        build_mask(np.zeros(5), 0)


def loss_oracle(logits, labels, mask):
    B = logits.shape[0]
    per = []
    for b in range(B):
        vals = []
        for y, x in zip(*np.nonzero(mask[b])):
            z = logits[b, :, y, x]
            p = np.exp(z - z.max())
            p /= p.sum()
            vals.append(-np.log(p[labels[b, y, x]]))
        per.append(np.mean(vals))
    return float(np.mean(per))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_mask_softmax_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B, C, H, W = rng.integers(1, 3), rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 6)
    logits = rng.standard_normal((B, C, H, W)) * 3
    labels = rng.integers(0, C, (B, H, W))
    mask = rng.random((B, H, W)) < 0.5
    mask[:, 0, 0] = True
    got = mask_softmax_loss(tc.Tensor(logits), labels, mask).item()
    np.testing.assert_allclose(got, loss_oracle(logits, labels, mask), rtol=1e-12)


def test_mask_softmax_gradient_zero_outside_mask():
    rng = np.random.default_rng(3)
    x = tc.Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
    labels = rng.integers(0, 4, (2, 5, 5))
    mask = rng.random((2, 5, 5)) < 0.4
    mask[:, 2, 2] = True
    rep = tc.gradcheck(lambda t: mask_softmax_loss(t, labels, mask), [x])
    assert rep.passed, rep.line()
    np.testing.assert_array_equal(np.moveaxis(x.grad, 1, -1)[~mask], 0.0)


def test_full_mask_equals_plain_softmax():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((1, 3, 4, 4))
    labels = rng.integers(0, 3, (1, 4, 4))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = -np.take_along_axis(logp, labels[:, None], axis=1).mean()
    got = mask_softmax_loss(tc.Tensor(logits), labels, full_mask(labels)).item()
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_mask_softmax_errors():
    x = tc.Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ConfigurationError):
        mask_softmax_loss(x, np.zeros((1, 4, 4), int), np.zeros((1, 4, 4), bool))
    with pytest.raises(ConfigurationError):
        mask_softmax_loss(x, np.full((1, 4, 4), 3), np.ones((1, 4, 4), bool))
    with pytest.raises(ConfigurationError):
        mask_softmax_loss(x, np.zeros((1, 5, 4), int), np.ones((1, 5, 4), bool))


def test_mask_softmax_unbatched():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((3, 4, 4))
    labels = rng.integers(0, 3, (4, 4))
    mask = np.ones((4, 4), bool)
    np.testing.assert_allclose(mask_softmax_loss(tc.Tensor(logits), labels, mask).item(),
                               mask_softmax_loss(tc.Tensor(logits[None]), labels[None], mask[None]).item())


def test_pose_loss_values_and_gradient():
    pred = tc.Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), requires_grad=True)
    target = np.array([[1.0, 2.0, 5.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(pose_euclidean_loss(pred, target).item(), 0.5 * (4 + 1) / 2)
    assert tc.gradcheck(lambda p: pose_euclidean_loss(p, target), [pred]).passed
    with pytest.raises(ConfigurationError):
        pose_euclidean_loss(pred, np.zeros(3))


def test_visibility_weighted_loss_hand_values():
    pred = tc.Tensor(np.array([1.0, 0.0, 0.5]))
    gt = np.array([1.0, 1.0, 0.0])
    np.testing.assert_allclose(visibility_weighted_loss(pred, gt).item(), 0.23 * 1.0 + 0.77 * 0.25)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_visibility_weighted_loss_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    p = rng.random(n)
    g = (rng.random(n) < 0.6).astype(float)
    expect = sum((0.23 if gi == 1 else 0.77) * (pi - gi) ** 2 for pi, gi in zip(p, g))
    np.testing.assert_allclose(visibility_weighted_loss(tc.Tensor(p), g).item(), expect, rtol=1e-12)


def test_visibility_weighted_loss_gradient():
    p = tc.Tensor(np.random.default_rng(6).random(8), requires_grad=True)
    g = np.array([1, 0, 1, 1, 0, 0, 1, 0.0])
    assert tc.gradcheck(lambda t: visibility_weighted_loss(t, g), [p]).passed
