"""SGD training with a step schedule, offline hard-sample mining and the fine stage."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor_core as tc
from .data.augment import augment
from .data.labels import rasterize_labels
from .errors import ConfigurationError, NumericError, TreeMismatchError
from .evaluator import POSE_SCALE, evaluate, per_sample_nme, to_input
from .losses import MIN_BACKGROUND, build_mask, full_mask, mask_softmax_loss, pose_euclidean_loss
from .net.model import PCDModel, coarse_forward, fine_forward, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    base_lr: float = 0.01
    lr_drop_every: float = 3  # math.inf keeps the rate constant
    lr_drop_factor: float = 10.0
    momentum: float = 0.95
    batch_size: int = 16
    seed: int = 0
    keypoint_weight: float = 1.0
    pose_weight: float = 1.0
    clip_norm: float = 10.0
    plain_softmax: bool = False
    min_background: int = MIN_BACKGROUND
    augment: bool = True
    mining: bool = False
    second_phase: bool = False  # run phase 2 without mining too, for equal-compute comparisons
    eval_every: int = 1  # validation period in epochs; the last epoch of a phase is always scored
    mining_mode: str = "equal"  # equal | proportion
    bin_width: float = 0.005

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("epochs must be >= 1 and batch_size >= 2")
        if not (self.base_lr > 0 and self.lr_drop_every > 0 and self.lr_drop_factor > 0 and 0 <= self.momentum < 1):
            raise ConfigurationError("learning-rate settings must be positive and momentum in [0, 1)")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every must be >= 0")
        if self.mining_mode not in ("equal", "proportion"):
            raise ConfigurationError(f"unknown mining mode {self.mining_mode!r}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """base_lr * factor^-floor(epoch / drop_every)."""
    if math.isinf(cfg.lr_drop_every):
        return cfg.base_lr
    return cfg.base_lr * cfg.lr_drop_factor ** (-math.floor(epoch / cfg.lr_drop_every))


def sgd_step(params, state: dict, lr: float, momentum: float) -> None:
    """v <- m v - lr g ; theta <- theta + v, for trainable parameters only.

    A missing gradient counts as zero.
    """
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name}")
        v = state.get(p.name)
        if v is None:
            v = state[p.name] = np.zeros_like(p.data)
        v *= momentum
        if g is not None:
            v -= lr * g
        p.data += v


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.trainable and p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        f = max_norm / norm
        for p in params:
            if p.trainable and p.grad is not None:
                p.grad *= f
    return norm


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    pose: Optional[np.ndarray]


def make_batch(samples, indices, cfg: TrainConfig, key: tuple, flip_perm, dtype) -> Batch:
    """Augment, rasterize and mask one batch; every random choice is seeded by ``key``."""
    imgs, labs, masks, poses = [], [], [], []
    for j, i in enumerate(indices):
        img, ann = samples.images[i], samples.annotations[i]
        if cfg.augment:
            img, ann = augment(img, ann, [cfg.seed, *key, j, 0], flip_perm)
        lab = rasterize_labels(ann, samples.image_size)
        msk = full_mask(lab) if cfg.plain_softmax else build_mask(lab, [cfg.seed, *key, j, 1], ann.count,
                                                                    cfg.min_background)
        imgs.append(img)
        labs.append(lab)
        masks.append(msk)
        poses.append(None if ann.pose is None else np.asarray(ann.pose) / POSE_SCALE)
    pose = None if any(p is None for p in poses) else np.stack(poses).astype(dtype)
    return Batch(to_input(np.stack(imgs), dtype), np.stack(labs), np.stack(masks), pose)


@dataclass
class MiningState:
    errors: np.ndarray
    counts: np.ndarray
    threshold: float
    hard: np.ndarray
    easy: np.ndarray


def mine(errors, bin_width: float = 0.005) -> MiningState:
    """Split samples at the centre of the tallest error-histogram bin.

    Ties between bins go to the lower bin. Samples without an error (NaN)
    count as easy.
    """
    e = np.asarray(errors, dtype=np.float64)
    ok = np.isfinite(e)
    if not ok.any():
        raise ConfigurationError("mining needs at least one finite error")
    bins = np.floor(e[ok] / bin_width).astype(np.int64)
    counts = np.bincount(bins)
    c_mode = (int(np.argmax(counts)) + 0.5) * bin_width
    hard_mask = ok & (np.where(ok, e, -np.inf) > c_mode)
    return MiningState(e, counts, c_mode, np.flatnonzero(hard_mask), np.flatnonzero(~hard_mask))


def _epoch_order(rng: np.random.Generator, n: int, steps: int, per_batch: int) -> np.ndarray:
    """Enough reshuffled passes over ``range(n)`` to fill ``steps * per_batch`` slots."""
    need = steps * per_batch
    parts = [rng.permutation(n) for _ in range(-(-need // n))]
    return np.concatenate(parts)[:need].reshape(steps, per_batch)


def _batches(rng, cfg: TrainConfig, n: int, mining: Optional[MiningState]):
    steps = n // cfg.batch_size
    if mining is None or cfg.mining_mode == "proportion" or mining.hard.size == 0:
        order = rng.permutation(n)
        return [order[s * cfg.batch_size : (s + 1) * cfg.batch_size] for s in range(steps)]
    half = cfg.batch_size // 2
    hard = mining.hard[_epoch_order(rng, mining.hard.size, steps, half)]
    easy = mining.easy[_epoch_order(rng, mining.easy.size, steps, cfg.batch_size - half)]
    return [np.concatenate([h, e]) for h, e in zip(hard, easy)]


@dataclass
class TrainResult:
    model: PCDModel
    log: list = field(default_factory=list)
    mining: Optional[MiningState] = None
    snapshots: dict = field(default_factory=dict)


class _Trainer:
    def __init__(self, model: PCDModel, cfg: TrainConfig, stage: str, log_path=None,
                 on_epoch: Optional[Callable] = None):
        self.model = model
        self.cfg = cfg
        self.stage = stage
        self.params = list(model.params.values())
        self.velocity: dict = {}
        self.log: list = []
        self.log_path = log_path
        self.on_epoch = on_epoch

    def step(self, batch: Batch, lr: float) -> float:
        m, cfg = self.model, self.cfg
        m.zero_grad()
        use_pose = self.stage == "coarse" and batch.pose is not None and cfg.pose_weight > 0
        with tc.leaf_checks_only():
            if self.stage == "fine":
                coarse = coarse_forward(m, tc.Tensor(batch.x), training=False)  # detached, frozen
            with tc.Tape() as tape:
                if self.stage == "fine":
                    out = fine_forward(m, tc.Tensor(batch.x), coarse, training=True)
                else:
                    out = forward(m, batch.x, training=True)
                loss = tc.scale(mask_softmax_loss(out.logits, batch.labels, batch.mask), cfg.keypoint_weight)
                if use_pose:
                    loss = tc.add(loss, tc.scale(pose_euclidean_loss(out.pose, batch.pose), cfg.pose_weight))
            tape.backward(loss)
        clip_gradients(self.params, cfg.clip_norm)
        sgd_step(self.params, self.velocity, lr, cfg.momentum)
        return loss.item()

    def run_phase(self, phase: int, samples, val, mining: Optional[MiningState]) -> None:
        cfg = self.cfg
        flip_perm = self.model.tree.flip_perm
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg, epoch)  # the schedule restarts each phase
            rng = np.random.default_rng([cfg.seed, phase, epoch])
            t0 = time.perf_counter()
            losses = []
            for step, idx in enumerate(_batches(rng, cfg, len(samples), mining)):
                batch = make_batch(samples, idx, cfg, (phase, epoch, step), flip_perm, self.model.dtype)
                losses.append(self.step(batch, lr))
            rec = {"stage": self.stage, "phase": phase, "epoch": epoch, "lr": lr,
                   "train_loss": float(np.mean(losses)) if losses else float("nan"),
                   "seconds": round(time.perf_counter() - t0, 3)}
            last = epoch == cfg.epochs - 1
            if val is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                rec["val_nme"] = evaluate(self.model, val, stage=self.stage).nme_mean
            self.log.append(rec)
            log.info("%s", json.dumps(rec))
            if self.log_path is not None:
                with open(self.log_path, "a") as f:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
            if self.on_epoch is not None:
                self.on_epoch(rec, self.model)


def _check_tree(model: PCDModel, samples) -> None:
    if samples.tree != model.tree.name:
        raise TreeMismatchError(f"model tree {model.tree.name!r} vs data tree {samples.tree!r}")


def _train(model, samples, cfg, val, stage, log_path, on_epoch, keep_snapshot) -> TrainResult:
    if len(samples) < cfg.batch_size:
        raise ConfigurationError(f"need at least {cfg.batch_size} training samples, got {len(samples)}")
    tr = _Trainer(model, cfg, stage, log_path, on_epoch)
    result = TrainResult(model)
    tr.run_phase(1, samples, val, None)
    if cfg.mining:
        if keep_snapshot:
            result.snapshots["phase1"] = copy.deepcopy(model)
        errors = per_sample_nme(model, samples, stage=stage)
        state = mine(errors, cfg.bin_width)
        if state.hard.size == 0:
            log.warning("hard-sample set is empty (threshold %.4f); mining phase samples uniformly", state.threshold)
        result.mining = state
        tr.velocity = {}
        tr.run_phase(2, samples, val, state)
    elif cfg.second_phase:
        tr.velocity = {}
        tr.run_phase(2, samples, val, None)
    result.log = tr.log
    return result


def train(model: PCDModel, samples, cfg: TrainConfig, val=None, log_path=None,
          on_epoch: Optional[Callable] = None, keep_snapshot: bool = False) -> TrainResult:
    """Train the coarse model in place.

    Phase 1 runs ``cfg.epochs`` epochs of uniform shuffling. With
    ``cfg.mining`` the training set is then split at the error-histogram mode
    and a second ``cfg.epochs`` run draws half of every batch from the hard
    group. ``cfg.second_phase`` runs that second stretch with uniform
    sampling instead, so a baseline can match a mining run epoch for epoch.
    Phase 1 consumes the same random streams either way, so its
    weights do not depend on the mining flag. When the data carry no pose
    labels PoseNet is frozen.
    """
    _check_tree(model, samples)
    no_pose = any(a.pose is None for a in samples.annotations)
    saved = {n: p.trainable for n, p in model.params.items()}
    if no_pose:
        log.info("no pose labels: PoseNet frozen, pose loss disabled")
        model.set_trainable("pose.", False)
    try:
        return _train(model, samples, cfg, val, "coarse", log_path, on_epoch, keep_snapshot)
    finally:
        for n, flag in saved.items():
            model.params[n].trainable = flag


def train_fine_stage(model: PCDModel, samples, cfg: TrainConfig, val=None, log_path=None,
                     on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train only the ``fine.*`` parameters; the coarse network runs frozen in eval mode."""
    _check_tree(model, samples)
    if not model.has_fine_stage:
        raise ConfigurationError("model has no fine stage; build it with fine_stage=True")
    saved = {n: p.trainable for n, p in model.params.items()}
    for n, p in model.params.items():
        p.trainable = n.startswith("fine.")
    try:
        return _train(model, samples, cfg, val, "fine", log_path, on_epoch, False)
    finally:
        for n, flag in saved.items():
            model.params[n].trainable = flag


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    if math.isinf(d["lr_drop_every"]):
        d["lr_drop_every"] = "inf"
    return d
