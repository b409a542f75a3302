"""Differentiable operators on NCHW tensors.

Shapes must match exactly; nothing broadcasts. Convolutions are
cross-correlations with PyTorch weight layouts:

* ``conv2d`` weight: ``(out, in // groups, k, k)``
* ``transposed_conv2d`` weight: ``(in, out // groups, k, k)``
"""
from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DegenerateBatchError
from . import _kernels
from .tensor import Tensor, make_result


_kink_log: Optional[list] = None


@contextlib.contextmanager
def kink_trace():
    """Record a fingerprint of every ReLU sign pattern and max-pool winner.

    Two evaluations with equal traces lie on the same linear piece of every
    non-smooth op, so a finite difference between them is trustworthy.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kinks(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(zlib.crc32(np.packbits(pattern).tobytes()) if pattern.dtype == bool
                         else zlib.crc32(np.ascontiguousarray(pattern).tobytes()))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigurationError(msg)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    _require(a.shape == b.shape, f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> contiguous (B, C, kh, kw, ho, wo) patch tensor."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def _col2im(cols: np.ndarray, hp: int, wp: int, s: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, C, kh, kw, ho, wo) into (B, C, hp, wp)."""
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += cols[:, :, i, j]
    return out


def _bias_grad(g: np.ndarray) -> np.ndarray:
    # matmul against ones beats a strided multi-axis reduction by ~2x
    B, C = g.shape[:2]
    ones = np.ones(g[0, 0].size, dtype=g.dtype)
    return np.matmul(g.reshape(B, C, -1), ones).sum(axis=0)


def _check_bias(bias: Optional[Tensor], n: int, op: str) -> None:
    if bias is not None:
        _require(bias.shape == (n,), f"{op}: bias shape {bias.shape} != ({n},)")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    _require(x.ndim == 4 and weight.ndim == 4, "conv2d expects 4-D input and weight")
    _require(stride >= 1 and pad >= 0 and groups >= 1, "conv2d: bad stride/pad/groups")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    _require(C % groups == 0 and O % groups == 0, f"conv2d: channels {C}->{O} not divisible by groups={groups}")
    _require(Cg == C // groups, f"conv2d: weight expects {Cg * groups} input channels, got {C}")
    _check_bias(bias, O, "conv2d")
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    _require(ho >= 1 and wo >= 1, f"conv2d: empty output for input {H}x{W}, k={kh}, s={stride}, p={pad}")

    if groups == C == O and Cg == 1 and stride == 1 and kh == kw:
        return _depthwise(x, weight, bias, pad)

    G, Og = groups, O // groups
    xd = x.data
    wd = weight.data.astype(xd.dtype, copy=False)
    xp = _pad(xd, pad)
    pointwise = kh == kw == 1 and stride == 1
    if pointwise:
        cols = xp.reshape(B, G, Cg, ho * wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(B, G, Cg * kh * kw, ho * wo)
    w2 = wd.reshape(G, Og, Cg * kh * kw)
    out = np.matmul(w2, cols).reshape(B, O, ho, wo)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward(g):
        g2 = g.reshape(B, G, Og, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w2.transpose(0, 2, 1), g2)
            if pointwise:
                gxp = dcols.reshape(xp.shape)
            else:
                gxp = _col2im(dcols.reshape(B, C, kh, kw, ho, wo), xp.shape[2], xp.shape[3], stride)
            gx = _crop(gxp, pad)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "conv2d")


def _depthwise(x: Tensor, weight: Tensor, bias: Optional[Tensor], pad: int) -> Tensor:
    B, C, H, W = x.shape
    k = weight.shape[2]
    ho, wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    xp = np.ascontiguousarray(_pad(x.data, pad))
    w = np.ascontiguousarray(weight.data[:, 0].astype(xp.dtype, copy=False))
    out = np.zeros((B, C, ho, wo), dtype=xp.dtype)
    _kernels.depthwise_forward(xp, w, out)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward(g):
        g = np.ascontiguousarray(g, dtype=xp.dtype)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _kernels.depthwise_input_grad(g, w, gxp)
            gx = _crop(gxp, pad)
        if weight.requires_grad:
            gw3 = np.zeros_like(w)
            _kernels.depthwise_weight_grad(xp, g, gw3)
            gw = gw3[:, None]
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "conv2d")


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                      pad: int = 0, groups: int = 1) -> Tensor:
    _require(x.ndim == 4 and weight.ndim == 4, "transposed_conv2d expects 4-D input and weight")
    _require(stride >= 1 and pad >= 0 and groups >= 1, "transposed_conv2d: bad stride/pad/groups")
    B, C, H, W = x.shape
    Cw, Og, kh, kw = weight.shape
    _require(Cw == C, f"transposed_conv2d: weight expects {Cw} input channels, got {C}")
    _require(C % groups == 0, f"transposed_conv2d: {C} channels not divisible by groups={groups}")
    G, Cg = groups, C // groups
    O = Og * G
    _check_bias(bias, O, "transposed_conv2d")
    hf, wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    _require(ho >= 1 and wo >= 1, f"transposed_conv2d: empty output for input {H}x{W}")

    if kh == kw and ho == stride * H and wo == stride * W and (kh > stride or pad > 0):
        return _subpixel_tconv(x, weight, bias, stride, pad, groups)

    xd = x.data
    wd = weight.data.astype(xd.dtype, copy=False)
    xg = xd.reshape(B, G, Cg, H * W)
    w2 = wd.reshape(G, Cg, Og * kh * kw)
    cols = np.matmul(w2.transpose(0, 2, 1), xg).reshape(B, O, kh, kw, H, W)
    tiled = kh == kw == stride and pad == 0
    if tiled:
        # kernel == stride: patches never overlap, so col2im is a pure reshuffle
        b = np.zeros(O, xd.dtype) if bias is None else bias.data.astype(xd.dtype)
        out = _kernels.tile_scatter(cols, b, np.empty((B, O, hf, wf), xd.dtype))
    else:
        out = np.ascontiguousarray(_crop(_col2im(cols, hf, wf, stride), pad))
        if bias is not None:
            out += bias.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward(g):
        gf = _pad(g, pad)
        if tiled:
            gcols = _kernels.tile_gather(np.ascontiguousarray(g, dtype=xd.dtype), np.empty(cols.shape, xd.dtype))
            gcols = gcols.reshape(B, G, Og * kh * kw, H * W)
        else:
            gcols = _im2col(gf, kh, kw, stride, H, W).reshape(B, G, Og * kh * kw, H * W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xg, gcols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "transposed_conv2d")


def tile_expand(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2,
                groups: int = 1) -> Tensor:
    """``transposed_conv2d`` with kernel == stride and no padding, left in tile-major layout.

    Output is (B, O, s*s*H, W): row ``(i*s + j)*H + y``, column ``x`` holds
    output pixel ``(s*y + i, s*x + j)``. Per-pixel ops (batch norm, 1x1 convs,
    further ``tile_expand`` stages) work on this layout unchanged, so a stack
    of stages needs only one :func:`spatial_permute` at the end.
    """
    _require(x.ndim == 4 and weight.ndim == 4, "tile_expand expects 4-D input and weight")
    B, C, H, W = x.shape
    Cw, Og, kh, kw = weight.shape
    _require(kh == kw == stride >= 1, f"tile_expand: kernel {kh}x{kw} must equal stride {stride}")
    _require(Cw == C and groups >= 1 and C % groups == 0, f"tile_expand: weight {weight.shape} vs input {x.shape}")
    G, Cg = groups, C // groups
    O = Og * G
    _check_bias(bias, O, "tile_expand")
    xd = x.data
    xg = xd.reshape(B, G, Cg, H * W)
    w2 = weight.data.astype(xd.dtype, copy=False).reshape(G, Cg, Og * kh * kw)
    out = np.matmul(w2.transpose(0, 2, 1), xg)
    if bias is not None:
        ob = out.reshape(B, O, kh * kw * H * W)
        ob += bias.data.astype(xd.dtype, copy=False)[None, :, None]
    out = out.reshape(B, O, kh * kw * H, W)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(B, G, Og * kh * kw, H * W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, g2).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xg, g2.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "tile_expand")


def tile_layout(height: int, width: int, stride: int, stages: int) -> np.ndarray:
    """Flat output-pixel index of every position after ``stages`` chained
    :func:`tile_expand` calls on an (height, width) map."""
    Y, X = np.mgrid[0:height, 0:width]
    for _ in range(stages):
        Y = np.concatenate([stride * Y + i for i in range(stride) for _j in range(stride)])
        X = np.concatenate([stride * X + j for _i in range(stride) for j in range(stride)])
    return Y * (width * stride ** stages) + X


def spatial_permute(x: Tensor, index: np.ndarray, shape: tuple) -> Tensor:
    """Scatter spatial positions: ``out.flat[index[p]] = x.flat[p]`` per (batch, channel),
    reshaped to (B, C) + ``shape``. ``index`` must be a permutation."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    B, C = x.shape[:2]
    n = idx.size
    _require(n == int(np.prod(x.shape[2:])) == int(np.prod(shape)), "spatial_permute: size mismatch")
    inv = np.empty_like(idx)
    inv[idx] = np.arange(n)
    out = np.take(x.data.reshape(B, C, n), inv, axis=2).reshape((B, C) + tuple(shape))

    def backward(g):
        return (np.take(g.reshape(B, C, n), idx, axis=2).reshape(x.shape),)

    return make_result(out, (x,), backward, "spatial_permute")


def _subpixel_taps(k: int, s: int, p: int):
    """Tap table mapping a stride-s transposed conv onto a stride-1 conv with s*s
    output phases: entries (phase r, equivalent offset j, original tap).

    Output row s*m + r reads input row m + d through tap r + p - s*d.
    """
    ds = [d for r in range(s) for d in range(-k, k + 1) if 0 <= r + p - s * d < k]
    dmin, dmax = min(ds), max(ds)
    taps = [(r, d - dmin, r + p - s * d) for r in range(s) for d in range(dmin, dmax + 1) if 0 <= r + p - s * d < k]
    return taps, dmax - dmin + 1, -dmin, dmax


def _subpixel_weight(weight: Tensor, groups: int, stride: int, pad: int, K: int, taps) -> Tensor:
    """(C, Og, k, k) transposed-conv weight -> (G*Og*s*s, Cg, K, K) conv weight."""
    C, Og, k, _ = weight.shape
    G, Cg, s = groups, C // groups, stride
    wd = weight.data.reshape(G, Cg, Og, k, k)
    eq = np.zeros((G, Og, s, s, Cg, K, K), dtype=weight.data.dtype)
    for ry, jy, ky in taps:
        for rx, jx, kx in taps:
            eq[:, :, ry, rx, :, jy, jx] = wd[:, :, :, ky, kx].transpose(0, 2, 1)

    def backward(g):
        g = g.reshape(G, Og, s, s, Cg, K, K)
        gw = np.zeros((G, Cg, Og, k, k), dtype=g.dtype)
        for ry, jy, ky in taps:
            for rx, jx, kx in taps:
                gw[:, :, :, ky, kx] += g[:, :, ry, rx, :, jy, jx].transpose(0, 2, 1)
        return (gw.reshape(weight.shape),)

    return make_result(eq.reshape(G * Og * s * s, Cg, K, K), (weight,), backward, "subpixel_weight")


def _pixel_shuffle(y: Tensor, s: int, bias: Optional[Tensor]) -> Tensor:
    """(B, O*s*s, H, W) phase planes -> (B, O, s*H, s*W), plus an optional bias."""
    B, C, H, W = y.shape
    O = C // (s * s)
    out = np.ascontiguousarray(y.data.reshape(B, O, s, s, H, W).transpose(0, 1, 4, 2, 5, 3)).reshape(B, O, s * H, s * W)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward(g):
        gy = np.ascontiguousarray(g.reshape(B, O, H, s, W, s).transpose(0, 1, 3, 5, 2, 4)).reshape(y.shape)
        if bias is None:
            return (gy,)
        return gy, _bias_grad(g)

    inputs = (y,) if bias is None else (y, bias)
    return make_result(out, inputs, backward, "pixel_shuffle")


def _subpixel_tconv(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, pad: int, groups: int) -> Tensor:
    # same result as scatter-adding k*k taps, without the (k*k)-fold column buffer
    k = weight.shape[2]
    taps, K, lo, hi = _subpixel_taps(k, stride, pad)
    xp = x
    if lo != hi:
        xp = _pad_asym(x, lo, hi)
        lo = 0
    w_eq = _subpixel_weight(weight, groups, stride, pad, K, taps)
    y = conv2d(xp, w_eq, None, stride=1, pad=lo, groups=groups)
    return _pixel_shuffle(y, stride, bias)


def _pad_asym(x: Tensor, lo: int, hi: int) -> Tensor:
    out = np.pad(x.data, ((0, 0), (0, 0), (max(lo, 0), max(hi, 0)), (max(lo, 0), max(hi, 0))))
    H, W = out.shape[2:]
    out = out[:, :, max(-lo, 0) : H - max(-hi, 0), max(-lo, 0) : W - max(-hi, 0)]

    def backward(g):
        gp = np.zeros((g.shape[0], g.shape[1], H, W), dtype=g.dtype)
        gp[:, :, max(-lo, 0) : H - max(-hi, 0), max(-lo, 0) : W - max(-hi, 0)] = g
        return (gp[:, :, max(lo, 0) : H - max(hi, 0), max(lo, 0) : W - max(hi, 0)],)

    return make_result(np.ascontiguousarray(out), (x,), backward, "pad")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    return _batch_norm(x, gamma, beta, state, training, False)


def relu_batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """batch_norm(relu(x)) in one pass, without storing the rectified map."""
    return _batch_norm(x, gamma, beta, state, training, True)


def _batch_norm(x, gamma, beta, state, training, relu):
    op = "relu_batch_norm" if relu else "batch_norm"
    _require(x.ndim == 4, f"{op} expects NCHW input")
    B, C, H, W = x.shape
    _require(gamma.shape == (C,) and beta.shape == (C,), f"{op}: gamma/beta must have length {C}")
    xd = np.ascontiguousarray(x.data)
    dt = xd.dtype
    n = B * H * W
    if relu:
        _note_kinks(xd > 0)
    if training:
        if n < 2:
            raise DegenerateBatchError(f"{op} in train mode needs at least 2 values per channel")
        mean, var = np.empty(C), np.empty(C)
        _kernels.bn_stats(xd, relu, mean, var)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * (n / (n - 1))).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + state.eps)
    g64 = gamma.data.astype(np.float64)
    out = _kernels.bn_apply(xd, relu, mean.astype(dt), (g64 * inv).astype(dt), beta.data.astype(dt), np.empty_like(xd))

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dt)
        dgamma, dbeta = np.empty(C), np.empty(C)
        _kernels.bn_grad_sums(g, xd, relu, mean.astype(dt), inv, dgamma, dbeta)
        gx = None
        if x.requires_grad:
            if training:
                gx = _kernels.bn_input_grad(g, xd, relu, mean.astype(dt), inv.astype(dt), g64.astype(dt),
                                            dgamma.astype(dt), dbeta.astype(dt), np.empty_like(g))
            else:
                gx = _kernels.bn_eval_grad(g, xd, relu, (g64 * inv).astype(dt), np.empty_like(g))
        return gx, dgamma.astype(gamma.data.dtype), dbeta.astype(beta.data.dtype)

    return make_result(out, (x, gamma, beta), backward, op)


def channel_softmax(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of (B,C,H,W) or (C,H,W)."""
    _require(x.ndim in (3, 4), "channel_softmax expects (C,H,W) or (B,C,H,W)")
    axis = x.ndim - 3
    _require(x.shape[axis] >= 2, "channel_softmax needs at least 2 channels")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "channel_softmax")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    _note_kinks(x.data > 0)

    def backward(g):
        # subgradient at exactly zero is zero
        gc = np.ascontiguousarray(g)
        yc = out if out.dtype == gc.dtype else out.astype(gc.dtype)
        return (_kernels.relu_mask(gc, yc, np.empty_like(gc)),)

    return make_result(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None), (g * ad if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "multiply")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return make_result(x.data * c, (x,), backward, "scale")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; ties go to the first element."""
    _require(x.ndim == 4, "max_pool2d expects NCHW input")
    B, C, H, W = x.shape
    _require(H % size == 0 and W % size == 0, f"max_pool2d: {H}x{W} not divisible by {size}")
    h2, w2 = H // size, W // size
    blocks = x.data.reshape(B, C, h2, size, w2, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2, w2, size * size)
    idx = blocks.argmax(axis=-1)
    _note_kinks(idx.astype(np.uint8))
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, h2, w2, size * size), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, h2, w2, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2d")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    _require(len(xs) > 0, "concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs:
        _require(t.ndim == len(ref) and t.shape[0] == ref[0] and t.shape[2:] == ref[2:],
                 f"concat_channels: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, tuple(xs), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require(0 <= start < stop <= x.shape[1], f"slice_channels: [{start},{stop}) outside 0..{x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(out, (x,), backward, "slice_channels")


def gather_channels(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select (and possibly repeat) channels: out[:, j] = x[:, index[j]]."""
    idx = np.asarray(index, dtype=np.intp)
    _require(idx.ndim == 1 and idx.size > 0, "gather_channels: index must be a non-empty 1-D list")
    _require(idx.min() >= 0 and idx.max() < x.shape[1], "gather_channels: index out of range")
    unique = np.unique(idx).size == idx.size
    out = np.ascontiguousarray(x.data[:, idx])

    def backward(g):
        if unique:
            gx = np.zeros_like(x.data, dtype=g.dtype)
            gx[:, idx] = g
            return (gx,)
        # repeated indices: sum through the transposed selection matrix
        sel = np.zeros((idx.size, x.shape[1]), dtype=g.dtype)
        sel[np.arange(idx.size), idx] = 1
        B = g.shape[0]
        gx = np.matmul(sel.T, g.reshape(B, idx.size, -1)).reshape((B,) + x.shape[1:])
        return (gx,)

    return make_result(out, (x,), backward, "gather_channels")


def channel_mix(x: Tensor, matrix: np.ndarray) -> Tensor:
    """Fixed linear combination of channels: out[:, o] = sum_c matrix[o, c] * x[:, c]."""
    M = np.asarray(matrix, dtype=x.dtype)
    _require(M.ndim == 2 and M.shape[1] == x.shape[1], f"channel_mix: matrix {M.shape} vs {x.shape[1]} channels")
    B = x.shape[0]
    rest = x.shape[2:]
    flat = x.data.reshape(B, x.shape[1], -1)
    out = np.matmul(M, flat).reshape((B, M.shape[0]) + rest)

    def backward(g):
        return (np.matmul(M.T, g.reshape(B, M.shape[0], -1)).reshape(x.shape),)

    return make_result(out, (x,), backward, "channel_mix")


def global_avg_pool(x: Tensor) -> Tensor:
    _require(x.ndim == 4, "global_avg_pool expects NCHW input")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    _require(x.ndim == 2 and weight.ndim == 2 and x.shape[1] == weight.shape[1],
             f"linear: input {x.shape} incompatible with weight {weight.shape}")
    _check_bias(bias, weight.shape[0], "linear")
    wd = weight.data.astype(x.dtype, copy=False)
    out = x.data @ wd.T
    if bias is not None:
        out = out + bias.data.astype(out.dtype, copy=False)[None, :]

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "linear")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_result(np.asarray(x.data.sum()), (x,), backward, "sum_all")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(weights * x) with a constant weight array of the same shape."""
    w = np.asarray(weights, dtype=x.dtype)
    _require(w.shape == x.shape, f"weighted_sum: weights {w.shape} vs {x.shape}")

    def backward(g):
        return (g * w,)

    return make_result(np.asarray(np.sum(w * x.data)), (x,), backward, "weighted_sum")
