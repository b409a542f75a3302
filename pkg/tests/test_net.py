import numpy as np
import pytest

from pcdnet import tensor_core as tc
from pcdnet.errors import ConfigurationError, DataError, TreeMismatchError
from pcdnet.gradsuite import op_reports, perturb_defaults
from pcdnet.losses import build_mask, mask_softmax_loss, pose_euclidean_loss
from pcdnet.net import (
    AFLW21,
    COFW29,
    W300_68,
    DendriticTree,
    build_model,
    condition_on_pose,
    edge_kernel_size,
    forward,
    get_tree,
    load_checkpoint,
    message_pass,
    network_surgery,
    save_checkpoint,
)


# ---- trees --------------------------------------------------------------------

@pytest.mark.parametrize("tree,n", [(AFLW21, 21), (COFW29, 29), (W300_68, 68)])
def test_shipped_trees_are_valid(tree, n):
    tree.validate()
    assert tree.count == n
    assert len(tree.edges) == n - 1
    assert tree.nodes[tree.root] == "nose_tip"
    perm = np.array(tree.flip_perm)
    np.testing.assert_array_equal(perm[perm], np.arange(n))


def test_aliases():
    assert get_tree("21") is AFLW21 and get_tree("29") is COFW29 and get_tree("68") is W300_68
    with pytest.raises(ConfigurationError):
        get_tree("17")


def test_flip_perm_maps_edges_to_edges():
    # the 68-point mouth ring is cut into a chain, so only the smaller trees are mirror-symmetric
    for tree in (AFLW21, COFW29):
        edges = {frozenset(e) for e in tree.edges}
        p = tree.flip_perm
        assert {frozenset((p[a], p[b])) for a, b in tree.edges} == edges


def test_invalid_trees_rejected():
    base = dict(name="t", nodes=("a", "b", "c"), root=0, flip_perm=(0, 1, 2), eye_corners=())
    with pytest.raises(ConfigurationError, match="not a tree"):
        DendriticTree(edges=((0, 1),), **base).validate()
    with pytest.raises(ConfigurationError, match="disconnected"):
        DendriticTree(edges=((0, 1), (0, 1)), **base).validate()
    with pytest.raises(ConfigurationError, match="involution"):
        DendriticTree(**{**base, "flip_perm": (1, 2, 0)}, edges=((0, 1), (1, 2))).validate()


# ---- build --------------------------------------------------------------------

@pytest.mark.parametrize("tree,branches,edges", [("aflw21", 22, 40), ("cofw29", 30, 56), ("300w68", 69, 134)])
def test_branch_and_edge_counts(tree, branches, edges):
    m = build_model(tree, 64)
    assert m.num_outputs == branches
    assert m.num_trunks == branches
    assert m.num_edges == edges
    assert m.params["branch.final.w"].shape[0] == branches


def test_build_is_deterministic():
    a, b = build_model("21", 32, seed=5), build_model("21", 32, seed=5)
    c = build_model("21", 32, seed=6)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["kp.backbone.stem.w"].data, c.params["kp.backbone.stem.w"].data)


@pytest.mark.parametrize("size", [30, 24, 68])
def test_bad_image_size(size):
    with pytest.raises(ConfigurationError):
        build_model("21", size)


def test_edge_kernel_size():
    assert edge_kernel_size(64) == 5
    assert edge_kernel_size(224) == 15
    assert edge_kernel_size(32) == 3


def test_conditioning_channels_match_keypoint_features():
    m = build_model("21", 64)
    assert m.params["pose.cond.w"].shape[0] == m.config.backbone.out_channels


def test_variants_change_parameter_signature():
    sigs = {build_model("21", 64, **kw).parameter_count() for kw in
            ({}, {"conditioning": False}, {"more_filters": True}, {"fine_stage": True})}
    assert len(sigs) == 4


# ---- conditioning and message passing ----------------------------------------

def _rand(shape, seed=0, requires_grad=False):
    return tc.Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=requires_grad)


def test_condition_identity_and_annihilator():
    m = build_model("21", 32, dtype="float64")
    C = m.config.backbone.out_channels
    m.params["pose.cond.w"].data[...] = 0
    m.params["pose.cond.bn.gamma"].data[...] = 0
    m.params["pose.cond.bn.beta"].data[...] = 1  # block emits exactly ones
    kp, pose = _rand((2, C, 4, 4), 1), _rand((2, C, 4, 4), 2)
    np.testing.assert_array_equal(condition_on_pose(kp, pose, m).data, kp.data)
    zeros = tc.Tensor(np.zeros((2, C, 4, 4)))
    fresh = build_model("21", 32, dtype="float64")
    np.testing.assert_array_equal(condition_on_pose(zeros, pose, fresh, training=True).data, 0.0)


def test_condition_shape_mismatch():
    m = build_model("21", 32)
    with pytest.raises(ConfigurationError):
        condition_on_pose(_rand((1, 32, 4, 4)), _rand((1, 32, 2, 2)), m)


def test_condition_gradients_reach_both_inputs():
    m = build_model("21", 32, dtype="float64")
    C = m.config.backbone.out_channels
    kp, pose = _rand((2, C, 3, 3), 3, True), _rand((2, C, 3, 3), 4, True)
    rep = tc.gradcheck(lambda a, b: condition_on_pose(a, b, m, training=True), [kp, pose], name="condition")
    assert rep.passed, rep.line()
    assert np.abs(kp.grad).max() > 0 and np.abs(pose.grad).max() > 0


def test_message_pass_zero_kernels_is_identity():
    R = _rand((2, 21, 8, 8))
    K = tc.Tensor(np.zeros((40, 1, 5, 5)))
    np.testing.assert_array_equal(message_pass(R, AFLW21, K).data, R.data)


def _two_node_tree():
    return DendriticTree("pair", ("a", "b"), ((0, 1),), 0, (0, 1), ()).validate()


def test_message_pass_impulse_edges():
    R = _rand((1, 2, 6, 6))
    K = np.zeros((2, 1, 3, 3))
    K[:, 0, 1, 1] = 1.0
    H = message_pass(R, _two_node_tree(), tc.Tensor(K)).data
    np.testing.assert_allclose(H[:, 0], R.data[:, 0] + R.data[:, 1], atol=0, rtol=0)
    np.testing.assert_allclose(H[:, 1], R.data[:, 1] + R.data[:, 0], atol=0, rtol=0)


def message_oracle(R, tree, K):
    """Direct summation with an explicit correlation loop."""
    B, N, Hh, W = R.shape
    k = K.shape[-1]
    p = k // 2
    out = R.copy()
    for e, (s, d) in enumerate(tree.directed_edges()):
        Rp = np.pad(R[:, s], ((0, 0), (p, p), (p, p)))
        for y in range(Hh):
            for x in range(W):
                out[:, d, y, x] += np.einsum("bij,ij->b", Rp[:, y : y + k, x : x + k], K[e, 0])
    return out


def test_message_pass_star_tree_oracle():
    star = DendriticTree("star", ("c", "l1", "l2", "l3"), ((0, 1), (0, 2), (0, 3)), 0, (0, 1, 2, 3), ()).validate()
    rng = np.random.default_rng(11)
    for _ in range(5):
        R = rng.standard_normal((2, 4, 7, 7))
        K = rng.standard_normal((6, 1, 3, 3))
        got = message_pass(tc.Tensor(R), star, tc.Tensor(K)).data
        np.testing.assert_allclose(got, message_oracle(R, star, K), atol=1e-12)


def test_message_pass_count_mismatch():
    with pytest.raises(ConfigurationError):
        message_pass(_rand((1, 20, 4, 4)), AFLW21, tc.Tensor(np.zeros((40, 1, 3, 3))))


# ---- forward ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_model():
    return build_model("21", 32, seed=2)


def test_forward_shapes_and_softmax(small_model):
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    out = forward(small_model, x)
    assert out.logits.shape == (2, 22, 32, 32)
    assert out.pose.shape == (2, 3)
    p = tc.channel_softmax(out.logits).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_wrong_size_and_missing_fine(small_model):
    with pytest.raises(ConfigurationError):
        forward(small_model, np.zeros((1, 3, 64, 64), np.float32))
    with pytest.raises(ConfigurationError):
        forward(small_model, np.zeros((1, 3, 32, 32), np.float32), stage="fine")


def test_fine_forward_shapes():
    m = build_model("21", 32, fine_stage=True)
    out = forward(m, np.zeros((2, 3, 32, 32), np.float32), stage="fine")
    assert out.logits.shape == out.coarse_logits.shape == (2, 22, 32, 32)


def _batch_loss(m, x, labels, mask, which):
    out = forward(m, x, training=True)
    if which == "kp":
        return mask_softmax_loss(out.logits, labels, mask)
    return pose_euclidean_loss(out.pose, np.full((x.shape[0], 3), 0.3))


def _labels(size, n, seed):
    rng = np.random.default_rng(seed)
    lab = np.full((size, size), n)
    pix = rng.choice(size * size, n, replace=False)
    lab.reshape(-1)[pix] = np.arange(n)
    return lab


def test_gradient_flow_asymmetry():
    m = build_model("21", 32, seed=4, dtype="float64")
    x = np.random.default_rng(1).standard_normal((2, 3, 32, 32))
    labels = np.stack([_labels(32, 21, s) for s in (0, 1)])
    mask = np.stack([build_mask(l, s) for s, l in enumerate(labels)])
    for which in ("kp", "pose"):
        m.zero_grad()
        with tc.Tape() as tape:
            loss = _batch_loss(m, x, labels, mask, which)
        tape.backward(loss)
        pose_g = max(np.abs(p.grad).max() for p in m.parameters("pose.backbone") if p.grad is not None)
        kp_grads = [p.grad for p in m.parameters("kp.") + m.parameters("branch.") + m.parameters("edge.")]
        if which == "kp":
            assert pose_g > 0
        else:
            assert pose_g > 0
            assert all(g is None or not np.any(g) for g in kp_grads)


def test_coarse_model_spot_check_double():
    m = perturb_defaults(build_model("21", 32, seed=8, dtype="float64"), 0)
    x = np.random.default_rng(2).standard_normal((2, 3, 32, 32))
    labels = np.stack([_labels(32, 21, s) for s in (3, 4)])
    mask = np.stack([build_mask(l, s) for s, l in enumerate(labels)])
    target = np.random.default_rng(3).uniform(-1, 1, (2, 3))

    def loss_fn():
        out = forward(m, x, training=True)
        return tc.add(mask_softmax_loss(out.logits, labels, mask), pose_euclidean_loss(out.pose, target))

    rep = tc.spot_check(loss_fn, list(m.params.values()), count=12, tol=1e-4, seed=1, name="coarse model")
    assert rep.passed, (rep.line(), rep.per_input)


# ---- surgery ------------------------------------------------------------------

def test_identity_surgery_preserves_outputs():
    m = perturb_defaults(build_model("21", 32, seed=3, dtype="float64"), 1)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    before = forward(m, x)
    after = forward(network_surgery(m, AFLW21), x)
    np.testing.assert_allclose(after.logits.data, before.logits.data, atol=1e-6)
    np.testing.assert_allclose(after.pose.data, before.pose.data, atol=1e-12)


@pytest.mark.parametrize("tree,outputs,edges", [(COFW29, 30, 56), (W300_68, 69, 134)])
def test_surgery_to_larger_trees(tree, outputs, edges):
    m = build_model("21", 32, seed=3)
    s = network_surgery(m, tree)
    assert s.tree is tree
    assert s.num_edges == edges
    out = forward(s, np.zeros((1, 3, 32, 32), np.float32))
    assert out.logits.shape == (1, outputs, 32, 32)
    # widened last two deconvolution stages
    assert s.params["branch.t3.w"].shape[1] == 4 * m.params["branch.t3.w"].shape[1]


def test_surgery_copies_split_heads():
    m = build_model("21", 32, seed=3)
    s = network_surgery(m, COFW29)
    src = AFLW21.index("left_eye_center")
    for name in ("left_pupil", "left_eye_top", "left_eye_bottom"):
        np.testing.assert_array_equal(s.params["branch.final.w"].data[COFW29.index(name)],
                                      m.params["branch.final.w"].data[src])


def test_surgery_unmapped_node():
    m = build_model("21", 32)
    bad = dict(COFW29.split_from)
    bad.pop("chin")
    with pytest.raises(ConfigurationError, match="unmapped"):
        network_surgery(m, COFW29, bad)


# ---- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build_model("21", 32, seed=9, more_filters=True)
    m.bn["kp.backbone.stem.bn"].running_mean[:] = 0.25
    p = tmp_path / "m.pcdc"
    save_checkpoint(m, p)
    assert p.read_bytes()[:4] == b"PCDC"
    r = load_checkpoint(p)
    assert r.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(r.params[k].data, m.params[k].data)
    np.testing.assert_array_equal(r.bn["kp.backbone.stem.bn"].running_mean, 0.25)
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(r, x).logits.data, forward(m, x).logits.data)


def test_checkpoint_surgery_round_trip(tmp_path):
    s = network_surgery(build_model("21", 32, seed=9), COFW29)
    save_checkpoint(s, tmp_path / "s.pcdc")
    r = load_checkpoint(tmp_path / "s.pcdc")
    assert r.tree is COFW29 and r.config.head_index == s.config.head_index


def test_checkpoint_errors(tmp_path):
    m = build_model("21", 32)
    p = tmp_path / "m.pcdc"
    save_checkpoint(m, p)
    with pytest.raises(TreeMismatchError):
        load_checkpoint(p, expect_tree="cofw29")
    raw = p.read_bytes()
    (tmp_path / "t.pcdc").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "t.pcdc")
    (tmp_path / "x.pcdc").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.pcdc")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.pcdc")


def test_gradsuite_covers_every_op_and_passes():
    reps = op_reports(seed=3)
    names = {r.name for r in reps}
    assert {"conv2d", "transposed_conv2d", "batch_norm_train", "relu_batch_norm", "message_pass",
            "mask_softmax_loss", "condition_on_pose"} <= names
    assert all(r.passed for r in reps), [r.line() for r in reps if not r.passed]


@pytest.mark.parametrize("training", [True, False])
def test_tiled_branch_path_matches_transposed_conv(training):
    from pcdnet.net.model import branches_forward

    m = perturb_defaults(build_model("21", 32, seed=5, dtype="float64"), 2)
    feat = _rand((2, m.config.backbone.out_channels, 4, 4), 6)
    fast = branches_forward(m, "branch", feat, training=training, tiled=True).data
    slow = branches_forward(m, "branch", feat, training=training, tiled=False).data
    assert fast.shape == (2, 22, 32, 32)
    np.testing.assert_allclose(fast, slow, atol=1e-10)
