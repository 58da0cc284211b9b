"""Fused conv -> batch norm -> ReLU -> 2x max-pool for the first block.

The first block dominates memory traffic (50 x 23^3 activations per
patch), so it is computed channels-last straight out of the im2col GEMM
and the normalization, rectification and pooling run as single numba
passes. Results match the composition of the reference layers in
:mod:`jule3d.net3d.layers` (checked in the test suite).
"""

import numba
import numpy as np

from . import layers as L


@numba.njit(cache=True)
def _channel_stats(z):
    # z: (rows, C); shifted sums keep float64 accumulation well conditioned
    rows, c = z.shape
    shift = z[0].astype(np.float64)
    s = np.zeros(c)
    ss = np.zeros(c)
    for i in range(rows):
        for k in range(c):
            v = z[i, k] - shift[k]
            s[k] += v
            ss[k] += v * v
    mean = s / rows
    var = ss / rows - mean * mean
    for k in range(c):
        if var[k] < 0.0:
            var[k] = 0.0
    return mean + shift, var


@numba.njit(cache=True)
def _bn_relu_pool(z, scale, shift, out, arg):
    # z: (n, X, Y, Z, C) channels-last; out/arg: (n, C, X//2, Y//2, Z//2)
    n, nx, ny, nz, c = z.shape
    ox, oy, oz = nx // 2, ny // 2, nz // 2
    best = np.empty(c, dtype=z.dtype)
    where = np.empty(c, dtype=np.int8)
    for s in range(n):
        for i in range(ox):
            for j in range(oy):
                for k in range(oz):
                    for q in range(8):
                        a = 2 * i + (q >> 2)
                        b = 2 * j + ((q >> 1) & 1)
                        d = 2 * k + (q & 1)
                        for ch in range(c):
                            v = z[s, a, b, d, ch] * scale[ch] + shift[ch]
                            if v < 0:
                                v = 0
                            if q == 0 or v > best[ch]:
                                best[ch] = v
                                where[ch] = q
                    for ch in range(c):
                        out[s, ch, i, j, k] = best[ch]
                        arg[s, ch, i, j, k] = where[ch]


@numba.njit(cache=True)
def _pooled_grad_sums(z, scale, shift, mean, inv_std, grad_pool, arg, gsel):
    # gsel[s, i, j, k, ch]: upstream gradient routed to the argmax voxel, 0 where ReLU is off
    n, nx, ny, nz, c = z.shape
    ox, oy, oz = nx // 2, ny // 2, nz // 2
    sum_g = np.zeros(c)
    sum_gx = np.zeros(c)
    for s in range(n):
        for i in range(ox):
            for j in range(oy):
                for k in range(oz):
                    for ch in range(c):
                        q = arg[s, ch, i, j, k]
                        v = z[s, 2 * i + (q >> 2), 2 * j + ((q >> 1) & 1), 2 * k + (q & 1), ch]
                        g = 0.0
                        if v * scale[ch] + shift[ch] > 0:
                            g = grad_pool[s, ch, i, j, k]
                            sum_g[ch] += g
                            sum_gx[ch] += g * (v - mean[ch]) * inv_std[ch]
                        gsel[s, i, j, k, ch] = g
    return sum_g, sum_gx


@numba.njit(cache=True)
def _bn_input_grad(z, mean, inv_std, coef, count, sum_g, sum_gx, gsel, arg, out):
    # out: (n, X, Y, Z, C); non-argmax voxels only see the batch-statistics terms
    n, nx, ny, nz, c = z.shape
    for s in range(n):
        for a in range(nx):
            for b in range(ny):
                for d in range(nz):
                    for ch in range(c):
                        xhat = (z[s, a, b, d, ch] - mean[ch]) * inv_std[ch]
                        out[s, a, b, d, ch] = -coef[ch] * (sum_g[ch] + xhat * sum_gx[ch])
    ox, oy, oz = nx // 2, ny // 2, nz // 2
    for s in range(n):
        for i in range(ox):
            for j in range(oy):
                for k in range(oz):
                    for ch in range(c):
                        q = arg[s, ch, i, j, k]
                        out[s, 2 * i + (q >> 2), 2 * j + ((q >> 1) & 1), 2 * k + (q & 1), ch] += (
                            coef[ch] * count * gsel[s, i, j, k, ch])


def block1_forward(x, w, b, gamma, beta, running_mean, running_var, training, keep_cache=False):
    """Fused first block; returns ``(pooled, cache)`` with ``pooled`` channels-first."""
    L._check_5d(x)
    n = x.shape[0]
    cout = w.shape[0]
    ksize = w.shape[2:]
    wmat = w.reshape(cout, -1).astype(x.dtype, copy=False)
    step = L._chunk_size(x, ksize)
    sp = tuple(d - k + 1 for d, k in zip(x.shape[2:], ksize))
    per = int(np.prod(sp))
    z = np.empty((n * per, cout), dtype=x.dtype)
    col_chunks = []
    for s in range(0, n, step):
        cols, _ = L._im2col(x[s:s + step], ksize)
        np.matmul(cols.T, wmat.T, out=z[s * per:s * per + cols.shape[1]])
        if keep_cache:
            col_chunks.append(cols)
    z += b.astype(x.dtype)
    z = z.reshape((n,) + sp + (cout,))
    if training:
        count = z.size // cout
        if count < 2:
            raise L.DegenerateBatch(f"need >= 2 values per channel in training mode, got {count}")
        mean, var = _channel_stats(z.reshape(-1, cout))
        running_mean *= 1 - L.BN_MOMENTUM
        running_mean += L.BN_MOMENTUM * mean
        running_var *= 1 - L.BN_MOMENTUM
        running_var += L.BN_MOMENTUM * var * count / (count - 1)
    else:
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + L.BN_EPS)
    scale = (gamma * inv_std).astype(x.dtype)
    shift = (beta - mean * gamma * inv_std).astype(x.dtype)
    out_sp = tuple(d // 2 for d in sp)
    pooled = np.empty((n, cout) + out_sp, dtype=x.dtype)
    arg = np.empty((n, cout) + out_sp, dtype=np.int8)
    _bn_relu_pool(z, scale, shift, pooled, arg)
    cache = None
    if keep_cache:
        cache = (col_chunks, step, z, scale, shift, mean, inv_std, gamma, arg, w.shape)
    return pooled, cache


def block1_backward(grad_pool, cache):
    """Returns ``(grad_w, grad_b, grad_gamma, grad_beta)``; the input gradient is not needed."""
    col_chunks, step, z, scale, shift, mean, inv_std, gamma, arg, wshape = cache
    cout = wshape[0]
    grad_pool = np.ascontiguousarray(grad_pool, dtype=z.dtype)
    gsel = np.empty(arg.shape[:1] + arg.shape[2:] + arg.shape[1:2], dtype=z.dtype)
    sum_g, sum_gx = _pooled_grad_sums(z, scale, shift, mean, inv_std, grad_pool, arg, gsel)
    count = z.size // cout
    coef = (gamma * inv_std / count).astype(np.float64)
    gz = np.empty_like(z)
    _bn_input_grad(z, mean, inv_std, coef, float(count), sum_g, sum_gx, gsel, arg, gz)
    gz = gz.reshape(-1, cout)
    per = gz.shape[0] // z.shape[0]
    gw = np.zeros((int(np.prod(wshape[1:])), cout), dtype=z.dtype)
    for i, cols in enumerate(col_chunks):
        rows = slice(i * step * per, i * step * per + cols.shape[1])
        gw += cols @ gz[rows]
    grad_b = gz.sum(axis=0)
    return gw.T.reshape(wshape), grad_b, sum_gx.astype(z.dtype), sum_g.astype(z.dtype)
