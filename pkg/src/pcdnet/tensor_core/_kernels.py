"""Compiled loops for memory-bound kernels.

The vectorized im2col path would materialize k*k copies of every edge
response map, which dominates memory traffic for the message-passing step.
Batch normalization over the full-resolution branch maps is likewise
bandwidth-bound, so its reductions and elementwise passes are fused here.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def depthwise_forward(xp, w, out):
    # xp: (B, C, H + k - 1, W + k - 1) padded input; w: (C, k, k); out: (B, C, H, W) zeroed
    B, C, H, W = out.shape
    k = w.shape[1]
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wij = w[c, i, j]
                    for y in range(H):
                        for x in range(W):
                            out[b, c, y, x] += wij * xp[b, c, y + i, x + j]
    return out


@njit(cache=True)
def depthwise_input_grad(g, w, gxp):
    # scatter form of the adjoint; gxp has the padded input shape and is zeroed
    B, C, H, W = g.shape
    k = w.shape[1]
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wij = w[c, i, j]
                    for y in range(H):
                        for x in range(W):
                            gxp[b, c, y + i, x + j] += wij * g[b, c, y, x]
    return gxp


@njit(cache=True, fastmath=True)
def depthwise_weight_grad(xp, g, gw):
    B, C, H, W = g.shape
    k = gw.shape[1]
    for c in range(C):
        for i in range(k):
            for j in range(k):
                # accumulate in the array dtype so the inner reduction vectorizes
                acc = gw[c, i, j] * 0
                for b in range(B):
                    for y in range(H):
                        row = gw[c, i, j] * 0
                        for x in range(W):
                            row += g[b, c, y, x] * xp[b, c, y + i, x + j]
                        acc += row
                gw[c, i, j] += acc
    return gw


@njit(cache=True)
def relu_mask(g, y, out):
    # out = g where y > 0 else 0; one pass instead of compare-then-multiply
    gf = g.ravel()
    yf = y.ravel()
    of = out.ravel()
    for i in range(gf.size):
        of[i] = gf[i] if yf[i] > 0 else 0
    return out


@njit(cache=True, fastmath=True)
def bn_stats(x, relu, mean, var):
    # two-pass per-channel mean and biased variance of x (or max(x, 0) when relu);
    # rows accumulate in the array dtype so they vectorize, totals in float64
    B, C, H, W = x.shape
    n = B * H * W
    zero = x[0, 0, 0, 0] * 0
    for c in range(C):
        acc = 0.0
        for b in range(B):
            for y in range(H):
                row = zero
                for z in range(W):
                    v = x[b, c, y, z]
                    if relu and v < 0:
                        v = zero
                    row += v
                acc += row
        m = acc / n
        cast = np.empty(1, x.dtype)
        cast[0] = m
        mc = cast[0]
        acc = 0.0
        for b in range(B):
            for y in range(H):
                row = zero
                for z in range(W):
                    v = x[b, c, y, z]
                    if relu and v < 0:
                        v = zero
                    d = v - mc
                    row += d * d
                acc += row
        mean[c] = m
        var[c] = acc / n


@njit(cache=True, fastmath=True)
def bn_apply(x, relu, shift, scale, beta, out):
    # out = (r(x) - shift) * scale + beta per channel, r = relu or identity
    B, C, H, W = x.shape
    zero = x[0, 0, 0, 0] * 0
    for b in range(B):
        for c in range(C):
            sh = shift[c]
            sc = scale[c]
            bt = beta[c]
            for y in range(H):
                if relu:
                    for z in range(W):
                        out[b, c, y, z] = (max(x[b, c, y, z], zero) - sh) * sc + bt
                else:
                    for z in range(W):
                        out[b, c, y, z] = (x[b, c, y, z] - sh) * sc + bt
    return out


@njit(cache=True, fastmath=True)
def bn_grad_sums(g, x, relu, mean, inv, dgamma, dbeta):
    B, C, H, W = g.shape
    zero = g[0, 0, 0, 0] * 0
    for c in range(C):
        sg = 0.0
        sgx = 0.0
        m = mean[c]  # passed in the data dtype
        for b in range(B):
            for y in range(H):
                rg = zero
                rgx = zero
                for z in range(W):
                    gv = g[b, c, y, z]
                    v = x[b, c, y, z]
                    if relu and v < 0:
                        v = zero
                    rg += gv
                    rgx += gv * (v - m)
                sg += rg
                sgx += rgx
        dbeta[c] = sg
        dgamma[c] = sgx * inv[c]


@njit(cache=True, fastmath=True)
def bn_input_grad(g, x, relu, mean, inv, gamma, dgamma, dbeta, out):
    # gx = gamma*inv/n * (n*g - dbeta - xhat*dgamma), masked by x > 0 when relu
    B, C, H, W = g.shape
    n = B * H * W
    zero = g[0, 0, 0, 0] * 0
    for b in range(B):
        for c in range(C):
            m = mean[c]
            iv = inv[c]
            k = gamma[c] * iv
            a = dbeta[c] / n
            d = dgamma[c] * iv / n
            for y in range(H):
                if relu:
                    for z in range(W):
                        v = x[b, c, y, z]
                        r = k * (g[b, c, y, z] - a - (max(v, zero) - m) * d)
                        out[b, c, y, z] = r if v > 0 else zero
                else:
                    for z in range(W):
                        out[b, c, y, z] = k * (g[b, c, y, z] - a - (x[b, c, y, z] - m) * d)
    return out


@njit(cache=True)
def bn_eval_grad(g, x, relu, scale, out):
    B, C, H, W = g.shape
    for b in range(B):
        for c in range(C):
            sc = scale[c]
            for y in range(H):
                for z in range(W):
                    if relu and x[b, c, y, z] <= 0:
                        out[b, c, y, z] = 0
                    else:
                        out[b, c, y, z] = g[b, c, y, z] * sc
    return out


@njit(cache=True)
def tile_scatter(cols, bias, out):
    # cols: (B, O, s, s, H, W) -> out: (B, O, s*H, s*W) with non-overlapping s x s tiles
    B, O, s, _, H, W = cols.shape
    for b in range(B):
        for o in range(O):
            bo = bias[o]
            for y in range(H):
                for i in range(s):
                    r = out[b, o, s * y + i]
                    for j in range(s):
                        c = cols[b, o, i, j, y]
                        for x in range(W):
                            r[s * x + j] = c[x] + bo
    return out


@njit(cache=True)
def tile_gather(g, cols):
    # adjoint of tile_scatter without the bias
    B, O, s, _, H, W = cols.shape
    for b in range(B):
        for o in range(O):
            for y in range(H):
                for i in range(s):
                    r = g[b, o, s * y + i]
                    for j in range(s):
                        c = cols[b, o, i, j, y]
                        for x in range(W):
                            c[x] = r[s * x + j]
    return cols


def warmup() -> None:
    """Trigger compilation for both float widths."""
    for dt in (np.float32, np.float64):
        xp = np.zeros((1, 1, 3, 3), dt)
        w = np.zeros((1, 3, 3), dt)
        out = np.zeros((1, 1, 1, 1), dt)
        depthwise_forward(xp, w, out)
        depthwise_input_grad(out, w, xp.copy())
        depthwise_weight_grad(xp, out, w.copy())
        relu_mask(out, out, out.copy())
        v = np.zeros(1)
        for r in (False, True):
            bn_stats(out, r, v, v.copy())
            bn_apply(out, r, v, v, v, out.copy())
            bn_grad_sums(out, out, r, v, v, v.copy(), v.copy())
            bn_input_grad(out, out, r, v, v, v, v, v, out.copy())
            bn_eval_grad(out, out, r, v, out.copy())
        c6 = np.zeros((1, 1, 1, 1, 1, 1), dt)
        tile_scatter(c6, np.zeros(1, dt), out.copy())
        tile_gather(out, c6)
