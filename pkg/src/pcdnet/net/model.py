"""Pose-conditioned dendritic network: construction and forward pass.

Layout of a coarse model::

    image -> PoseNet backbone -> GAP -> linear -> pose (3)
                        \\-> cond block (conv3x3, ReLU, BN) --\\
    image -> KeypointNet backbone ----------------------- (x) -> branches -> message pass -> logits

All landmark branches plus the background branch are stored as one grouped
stack so that a forward pass costs a handful of large matmuls instead of
N+1 small ones. Group ``g`` of every branch layer belongs to trunk ``g``.
"""
from __future__ import annotations

import functools

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .. import tensor_core as tc
from ..errors import ConfigurationError
from ..tensor_core import Parameter, Tensor
from .trees import DendriticTree, get_tree


@dataclass(frozen=True)
class FireSpec:
    squeeze_channels: int
    expand1x1_channels: int
    expand3x3_channels: int

    @property
    def out_channels(self) -> int:
        return self.expand1x1_channels + self.expand3x3_channels

    @classmethod
    def for_output(cls, out: int) -> "FireSpec":
        return cls(max(1, out // 4), out // 2, out - out // 2)


@dataclass(frozen=True)
class BackboneSpec:
    stem_channels: int = 16
    fire_channels: tuple = (16, 16, 32, 32)
    pool_after: tuple = (0, 2)  # 0 is the stem, k the k-th fire module

    @property
    def fires(self) -> list:
        return [FireSpec.for_output(c) for c in self.fire_channels]

    @property
    def out_channels(self) -> int:
        return self.fire_channels[-1]

    @property
    def output_stride(self) -> int:
        return 2 * 2 ** len(self.pool_after)


@dataclass(frozen=True)
class BranchSpec:
    deconv_channels: tuple = (32, 16, 8)
    squeeze_channels: tuple = (16, 8, 4)
    upsample: int = 2
    kernel: int = 2
    batch_norm: bool = True

    def __post_init__(self):
        if len(self.deconv_channels) != len(self.squeeze_channels) or not self.deconv_channels:
            raise ConfigurationError("branch spec needs one squeeze width per deconvolution stage")
        if self.kernel < self.upsample or (self.kernel - self.upsample) % 2:
            raise ConfigurationError("deconvolution kernel must exceed the stride by an even amount")

    @property
    def pad(self) -> int:
        return (self.kernel - self.upsample) // 2

    @property
    def total_upsample(self) -> int:
        return self.upsample ** len(self.deconv_channels)

    def widened(self, factor: int) -> "BranchSpec":
        """Multiply the last two deconvolution widths by ``factor``."""
        d = list(self.deconv_channels)
        d[-2] *= factor
        d[-1] *= factor
        return replace(self, deconv_channels=tuple(d))


def edge_kernel_size(image_size: int) -> int:
    k = max(3, int(round(14 * image_size / 224)))
    return k if k % 2 == 1 else k + 1


@dataclass
class ModelConfig:
    tree: str = "aflw21"
    image_size: int = 64
    seed: int = 0
    dtype: str = "float32"
    conditioning: bool = True
    more_filters: bool = False
    fine_stage: bool = False
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    branch: BranchSpec = field(default_factory=BranchSpec)
    # after surgery: output channel -> branch trunk; None means identity
    head_index: Optional[tuple] = None
    widened: bool = False

    def effective_branch(self) -> BranchSpec:
        return self.branch.widened(4) if (self.more_filters or self.widened) else self.branch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["backbone"].items()}
        d["branch"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["branch"].items()}
        if self.head_index is not None:
            d["head_index"] = list(self.head_index)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("backbone").items()}
        br = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("branch").items()}
        hi = d.pop("head_index", None)
        return cls(backbone=BackboneSpec(**bb), branch=BranchSpec(**br),
                   head_index=None if hi is None else tuple(hi), **d)


class PCDModel:
    """Named parameters, batch-norm states and the landmark tree they serve."""

    def __init__(self, config: ModelConfig, tree: DendriticTree):
        self.config = config
        self.tree = tree
        self.params: dict = {}
        self.bn: dict = {}

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def num_outputs(self) -> int:
        return self.tree.count + 1

    @property
    def num_trunks(self) -> int:
        hi = self.config.head_index
        return self.num_outputs if hi is None else max(hi) + 1

    @property
    def num_edges(self) -> int:
        return self.params["edge.kernels"].shape[0]

    @property
    def has_fine_stage(self) -> bool:
        return "fine.fuse.c1.w" in self.params

    def parameters(self, prefix: str = "") -> list:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def signature(self) -> dict:
        groups = {}
        for n, p in self.params.items():
            key = n.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        return {"total": self.parameter_count(), **groups}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n, p in self.params.items():
            if n.startswith(prefix):
                p.trainable = flag

    # -- construction helpers -------------------------------------------------

    def _rng(self, name: str) -> np.random.Generator:
        # per-name streams: adding a parameter never perturbs the others
        return np.random.default_rng([self.config.seed, zlib.crc32(name.encode())])

    def add_param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name}")
        p = Parameter(np.asarray(data, dtype=self.dtype), name)
        self.params[name] = p
        return p

    def he(self, name: str, shape: tuple, fan_in: float) -> Parameter:
        std = np.sqrt(2.0 / fan_in)
        return self.add_param(name, self._rng(name).standard_normal(shape) * std)

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add_param(name, np.zeros(shape))

    def add_bn(self, name: str, channels: int) -> None:
        self.add_param(f"{name}.gamma", np.ones(channels))
        self.add_param(f"{name}.beta", np.zeros(channels))
        self.bn[name] = tc.BatchNormState.create(channels, dtype=self.dtype)

    def add_conv(self, name: str, cin: int, cout: int, k: int, groups: int = 1, bn: bool = False) -> None:
        self.he(f"{name}.w", (cout, cin // groups, k, k), cin // groups * k * k)
        self.zeros(f"{name}.b", (cout,))
        if bn:
            self.add_bn(f"{name}.bn", cout)

    def add_deconv(self, name: str, cin: int, cout: int, k: int, stride: int, groups: int = 1) -> None:
        fan_in = cin // groups * k * k / stride ** 2
        self.he(f"{name}.w", (cin, cout // groups, k, k), fan_in)
        self.zeros(f"{name}.b", (cout,))


FINAL_INIT_SCALE = 0.1


# ---- building ----------------------------------------------------------------


def _add_backbone(m: PCDModel, prefix: str, in_channels: int, spec: BackboneSpec) -> None:
    m.add_conv(f"{prefix}.stem", in_channels, spec.stem_channels, 3, bn=True)
    c = spec.stem_channels
    for i, f in enumerate(spec.fires, start=1):
        m.add_conv(f"{prefix}.fire{i}.squeeze", c, f.squeeze_channels, 1, bn=True)
        m.add_conv(f"{prefix}.fire{i}.e1", f.squeeze_channels, f.expand1x1_channels, 1)
        m.add_conv(f"{prefix}.fire{i}.e3", f.squeeze_channels, f.expand3x3_channels, 3)
        m.add_bn(f"{prefix}.fire{i}.bn", f.out_channels)
        c = f.out_channels


def _add_branches(m: PCDModel, prefix: str, in_channels: int, spec: BranchSpec, trunks: int, outputs: int) -> None:
    c = in_channels
    groups = 1  # the first stage reads the shared features
    for s, (d, q) in enumerate(zip(spec.deconv_channels, spec.squeeze_channels), start=1):
        m.add_deconv(f"{prefix}.t{s}", c, trunks * d, spec.kernel, spec.upsample, groups=groups)
        m.add_conv(f"{prefix}.s{s}", trunks * d, trunks * q, 1, groups=trunks, bn=spec.batch_norm)
        if spec.batch_norm:
            m.add_bn(f"{prefix}.t{s}.bn", trunks * d)
        c = trunks * q
        groups = trunks
    q = spec.squeeze_channels[-1]
    m.add_conv(f"{prefix}.final", outputs * q, outputs, 1, groups=outputs)
    # start near uniform logits; large initial scores on 4096 pixels swamp the few masked ones
    m.params[f"{prefix}.final.w"].data *= FINAL_INIT_SCALE


def build_model(tree, image_size: int = 64, seed: int = 0, dtype: str = "float32", **overrides) -> PCDModel:
    """Build and initialize a model for ``tree`` at ``image_size`` pixels.

    Keyword overrides are forwarded to :class:`ModelConfig` (``conditioning``,
    ``more_filters``, ``fine_stage``, ``backbone``, ``branch``).
    """
    if not isinstance(tree, DendriticTree):
        tree = get_tree(tree)
    cfg = ModelConfig(tree=tree.name, image_size=image_size, seed=seed, dtype=dtype, **overrides)
    return build_from_config(cfg, tree)


def build_from_config(cfg: ModelConfig, tree: Optional[DendriticTree] = None) -> PCDModel:
    tree = tree or get_tree(cfg.tree)
    bb, br = cfg.backbone, cfg.effective_branch()
    if bb.output_stride != br.total_upsample:
        raise ConfigurationError(f"branch upsampling {br.total_upsample} != backbone stride {bb.output_stride}")
    if cfg.image_size < 32 or cfg.image_size % bb.output_stride:
        raise ConfigurationError(
            f"image size {cfg.image_size} must be >= 32 and divisible by {bb.output_stride}")
    m = PCDModel(cfg, tree)
    outputs = m.num_outputs
    trunks = m.num_trunks
    if cfg.head_index is not None and len(cfg.head_index) != outputs:
        raise ConfigurationError(f"head index has {len(cfg.head_index)} entries for {outputs} outputs")

    _add_backbone(m, "pose.backbone", 3, bb)
    m.he("pose.head.w", (3, bb.out_channels), bb.out_channels)
    m.zeros("pose.head.b", (3,))
    if cfg.conditioning:
        m.add_conv("pose.cond", bb.out_channels, bb.out_channels, 3, bn=True)
    _add_backbone(m, "kp.backbone", 3, bb)
    _add_branches(m, "branch", bb.out_channels, br, trunks, outputs)
    k = edge_kernel_size(cfg.image_size)
    e = 2 * (tree.count - 1)
    # zero kernels make the first pass an identity; messages grow once the node maps mean something
    m.zeros("edge.kernels", (e, 1, k, k))

    if cfg.fine_stage:
        m.add_conv("fine.fuse.c1", outputs, outputs, 1)
        m.add_conv("fine.fuse.c3", outputs, outputs, 3)
        _add_backbone(m, "fine.backbone", 3 + outputs, bb)
        if cfg.conditioning:
            m.add_conv("fine.cond", bb.out_channels, bb.out_channels, 3, bn=True)
        _add_branches(m, "fine.branch", bb.out_channels, br, outputs, outputs)
    return m


# ---- forward -----------------------------------------------------------------


def _conv(m, name, x, stride=1, pad=None, groups=1, training=False, act=True):
    w = m.params[f"{name}.w"]
    k = w.shape[2]
    y = tc.conv2d(x, w, m.params[f"{name}.b"], stride=stride, pad=k // 2 if pad is None else pad, groups=groups)
    if f"{name}.bn" in m.bn:
        return _bn(m, f"{name}.bn", y, training, relu=act)
    return tc.relu(y) if act else y


def _bn(m, name, x, training, relu=False):
    op = tc.relu_batch_norm if relu else tc.batch_norm
    return op(x, m.params[f"{name}.gamma"], m.params[f"{name}.beta"], m.bn[name], training)


def backbone_forward(m: PCDModel, prefix: str, x: Tensor, training: bool) -> Tensor:
    spec = m.config.backbone
    y = _conv(m, f"{prefix}.stem", x, stride=2, training=training)
    if 0 in spec.pool_after:
        y = tc.max_pool2d(y)
    for i in range(1, len(spec.fire_channels) + 1):
        s = _conv(m, f"{prefix}.fire{i}.squeeze", y, training=training)
        e1 = tc.conv2d(s, m.params[f"{prefix}.fire{i}.e1.w"], m.params[f"{prefix}.fire{i}.e1.b"])
        e3 = tc.conv2d(s, m.params[f"{prefix}.fire{i}.e3.w"], m.params[f"{prefix}.fire{i}.e3.b"], pad=1)
        y = _bn(m, f"{prefix}.fire{i}.bn", tc.concat_channels([e1, e3]), training, relu=True)
        if i in spec.pool_after:
            y = tc.max_pool2d(y)
    return y


def condition_on_pose(kp_feat: Tensor, pose_feat: Tensor, model: PCDModel, prefix: str = "pose.cond",
                      training: bool = False) -> Tensor:
    """kp_feat * BN(ReLU(conv3x3(pose_feat))); gradients reach both inputs."""
    if kp_feat.shape != pose_feat.shape:
        raise ConfigurationError(f"conditioning: feature shapes {kp_feat.shape} vs {pose_feat.shape}")
    return tc.multiply(kp_feat, _conv(model, prefix, pose_feat, training=training))


def branches_forward(m: PCDModel, prefix: str, feat: Tensor, head_index=None, training: bool = False,
                     tiled: Optional[bool] = None) -> Tensor:
    """Decode shared features into one logit map per output channel.

    ``tiled`` picks the tile-major fast path; by default it is used whenever
    the deconvolution kernel equals its stride.
    """
    spec = m.config.branch
    n_stages = len(spec.deconv_channels)
    # kernel == stride: run every stage in tile-major layout and reorder pixels once at the end
    if tiled is None:
        tiled = spec.kernel == spec.upsample and spec.pad == 0
    y = feat
    groups = 1
    for s in range(1, n_stages + 1):
        tw, tb = m.params[f"{prefix}.t{s}.w"], m.params[f"{prefix}.t{s}.b"]
        if tiled:
            y = tc.tile_expand(y, tw, tb, stride=spec.upsample, groups=groups)
        else:
            y = tc.transposed_conv2d(y, tw, tb, stride=spec.upsample, pad=spec.pad, groups=groups)
        if f"{prefix}.t{s}.bn" in m.bn:
            y = _bn(m, f"{prefix}.t{s}.bn", y, training, relu=True)
        else:
            y = tc.relu(y)
        sw = m.params[f"{prefix}.s{s}.w"]
        trunks = sw.shape[0] // _per_trunk_squeeze(m, s)
        y = _conv(m, f"{prefix}.s{s}", y, groups=trunks, training=training)
        groups = trunks
    q = _per_trunk_squeeze(m, n_stages)
    if head_index is not None:
        idx = [t * q + j for t in head_index for j in range(q)]
        y = tc.gather_channels(y, idx)
    fw = m.params[f"{prefix}.final.w"]
    out = tc.conv2d(y, fw, m.params[f"{prefix}.final.b"], groups=fw.shape[0])
    if tiled:
        H, W = feat.shape[2:]
        up = spec.total_upsample
        out = tc.spatial_permute(out, _tile_layout(H, W, spec.upsample, n_stages), (H * up, W * up))
    return out


@functools.lru_cache(maxsize=16)
def _tile_layout(h: int, w: int, stride: int, stages: int) -> np.ndarray:
    return tc.tile_layout(h, w, stride, stages)


def _per_trunk_squeeze(m: PCDModel, stage: int) -> int:
    return m.config.branch.squeeze_channels[stage - 1]


def incidence(tree: DendriticTree) -> np.ndarray:
    """(N, E) matrix summing directed-edge messages into their destinations."""
    edges = tree.directed_edges()
    M = np.zeros((tree.count, len(edges)))
    for e, (_, dst) in enumerate(edges):
        M[dst, e] = 1.0
    return M


def message_pass(responses: Tensor, tree: DendriticTree, kernels: Tensor) -> Tensor:
    """One simultaneous pass: H_i = R_i + sum_{j ~ i} f_{j->i}(R_j).

    ``responses`` is (B, N, H, W); ``kernels`` is (E, 1, k, k) ordered as
    ``tree.directed_edges()``.
    """
    if responses.ndim != 4 or responses.shape[1] != tree.count:
        raise ConfigurationError(f"message_pass: expected {tree.count} responses, got shape {responses.shape}")
    edges = tree.directed_edges()
    if kernels.shape[0] != len(edges):
        raise ConfigurationError(f"message_pass: {kernels.shape[0]} kernels for {len(edges)} directed edges")
    k = kernels.shape[2]
    src = tc.gather_channels(responses, [s for s, _ in edges])
    msg = tc.conv2d(src, kernels, None, pad=k // 2, groups=len(edges))
    return tc.add(responses, tc.channel_mix(msg, incidence(tree)))


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, N+1, H, W), background last
    pose: Tensor  # (B, 3) normalized yaw/pitch/roll
    coarse_logits: Optional[Tensor] = None
    pose_feat: Optional[Tensor] = None


def coarse_forward(m: PCDModel, image: Tensor, training: bool = False) -> ForwardOutput:
    n = m.tree.count
    pose_feat = backbone_forward(m, "pose.backbone", image, training)
    pose = tc.linear(tc.global_avg_pool(pose_feat), m.params["pose.head.w"], m.params["pose.head.b"])
    kp_feat = backbone_forward(m, "kp.backbone", image, training)
    if m.config.conditioning:
        kp_feat = condition_on_pose(kp_feat, pose_feat, m, "pose.cond", training)
    maps = branches_forward(m, "branch", kp_feat, m.config.head_index, training)
    nodes = message_pass(tc.slice_channels(maps, 0, n), m.tree, m.params["edge.kernels"])
    logits = tc.concat_channels([nodes, tc.slice_channels(maps, n, n + 1)])
    return ForwardOutput(logits, pose, None, pose_feat)


def fine_forward(m: PCDModel, image: Tensor, coarse: ForwardOutput, training: bool = False) -> ForwardOutput:
    """Second conv-deconv network fed with the image and a residual function of
    the coarse class probabilities."""
    if not m.has_fine_stage:
        raise ConfigurationError("model has no fine stage")
    p = tc.channel_softmax(coarse.logits)
    h = _conv(m, "fine.fuse.c1", p, training=training)
    h = _conv(m, "fine.fuse.c3", h, training=training, act=False)
    fused = tc.concat_channels([image, tc.add(p, h)])
    feat = backbone_forward(m, "fine.backbone", fused, training)
    if m.config.conditioning:
        feat = condition_on_pose(feat, coarse.pose_feat, m, "fine.cond", training)
    logits = branches_forward(m, "fine.branch", feat, training=training)
    return ForwardOutput(logits, coarse.pose, coarse.logits, coarse.pose_feat)


def forward(m: PCDModel, image, stage: str = "coarse", training: bool = False,
            coarse_training: Optional[bool] = None) -> ForwardOutput:
    """Run the model on an (B, 3, H, W) batch (a single (3, H, W) image is promoted)."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=m.dtype))
    if image.ndim == 3:
        image = Tensor(image.data[None])
    s = m.config.image_size
    if image.shape[1:] != (3, s, s):
        raise ConfigurationError(f"image shape {image.shape[1:]} does not match build size (3, {s}, {s})")
    if stage == "coarse":
        return coarse_forward(m, image, training)
    if stage != "fine":
        raise ConfigurationError(f"unknown stage {stage!r}")
    if not m.has_fine_stage:
        raise ConfigurationError("model has no fine stage")
    ct = training if coarse_training is None else coarse_training
    coarse = coarse_forward(m, image, ct)
    return fine_forward(m, image, coarse, training)
