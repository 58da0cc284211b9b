"""Forward/backward kernels for the layers of the 3D patch network.

Tensors are numpy arrays shaped ``(batch, channels, dx, dy, dz)``. Every
layer is a pair of plain functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the cache and the upstream gradient. The
functions are dtype-preserving, so the same code runs in float32 for
training and float64 for gradient checks.
"""

import numba
import numpy as np
import scipy.fft as sp_fft

from ..exceptions import DegenerateBatch, LabelOutOfRange, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_EPS = 1e-12

# im2col buffers are built per chunk of the batch to cap peak memory.
_IM2COL_BYTES = 160 * 2**20


def _check_5d(x, name="input"):
    if x.ndim != 5:
        raise ShapeMismatch(f"{name} must be 5-D (batch, channels, dx, dy, dz), got shape {x.shape}")


def _chunk_size(x, ksize):
    n, c, dx, dy, dz = x.shape
    kx, ky, kz = ksize
    per_item = (dx - kx + 1) * (dy - ky + 1) * (dz - kz + 1) * c * kx * ky * kz * x.itemsize
    return max(1, min(n, _IM2COL_BYTES // max(per_item, 1)))


@numba.njit(cache=True)
def _im2col_kernel(x, kx, ky, kz, out):
    # out: (c, kx, ky, kz, n, ox, oy, oz); innermost writes are contiguous
    n, c, dx, dy, dz = x.shape
    ox, oy, oz = dx - kx + 1, dy - ky + 1, dz - kz + 1
    for ch in range(c):
        for i in range(kx):
            for j in range(ky):
                for k in range(kz):
                    for s in range(n):
                        for a in range(ox):
                            for b in range(oy):
                                for d in range(oz):
                                    out[ch, i, j, k, s, a, b, d] = x[s, ch, a + i, b + j, d + k]


def _im2col(x, ksize):
    """Unfold ``x`` into a ``(channels * prod(ksize), n * positions)`` matrix."""
    n, c = x.shape[:2]
    kx, ky, kz = ksize
    ox, oy, oz = (d - k + 1 for d, k in zip(x.shape[2:], ksize))
    cols = np.empty((c, kx, ky, kz, n, ox, oy, oz), dtype=x.dtype)
    _im2col_kernel(np.ascontiguousarray(x), kx, ky, kz, cols)
    return cols.reshape(c * kx * ky * kz, -1), (ox, oy, oz)


def _col2im(cols, shape, ksize):
    """Scatter-add the transpose of :func:`_im2col` back into ``shape``."""
    n, c = shape[:2]
    kx, ky, kz = ksize
    ox, oy, oz = (d - k + 1 for d, k in zip(shape[2:], ksize))
    cols = cols.reshape(c, kx, ky, kz, n, ox, oy, oz)
    out = np.zeros((c, n) + tuple(shape[2:]), dtype=cols.dtype)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                out[:, :, i:i + ox, j:j + oy, k:k + oz] += cols[:, i, j, k]
    return out.transpose(1, 0, 2, 3, 4)


def _gemm_forward(x, w):
    n = x.shape[0]
    cout = w.shape[0]
    ksize = w.shape[2:]
    wmat = w.reshape(cout, -1).astype(x.dtype, copy=False)
    out_sp = tuple(d - k + 1 for d, k in zip(x.shape[2:], ksize))
    out = np.empty((n, cout) + out_sp, dtype=x.dtype)
    step = _chunk_size(x, ksize)
    for s in range(0, n, step):
        cols, sp = _im2col(x[s:s + step], ksize)
        res = cols.T @ wmat.T
        out[s:s + step] = res.reshape((-1,) + sp + (cout,)).transpose(0, 4, 1, 2, 3)
    return out


def _gemm_backward(grad_out, x, w, need_input_grad):
    cout = w.shape[0]
    ksize = w.shape[2:]
    gw = np.zeros((cout, x.shape[1] * int(np.prod(ksize))), dtype=grad_out.dtype)
    grad_x = np.empty(x.shape, dtype=grad_out.dtype) if need_input_grad else None
    wmat = w.reshape(cout, -1).astype(grad_out.dtype, copy=False)
    step = _chunk_size(x, ksize)
    for s in range(0, x.shape[0], step):
        xs = x[s:s + step]
        cols, _ = _im2col(xs, ksize)
        g = np.ascontiguousarray(grad_out[s:s + step].transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        gw += g @ cols.T
        if need_input_grad:
            grad_x[s:s + step] = _col2im(wmat.T @ g, xs.shape, ksize)
    return grad_x, gw.reshape(w.shape)


def _spectra(a, spatial):
    """Real FFT over the spatial axes, flattened to ``(freq, batch, channels)``."""
    f = sp_fft.rfftn(a, s=spatial, axes=(2, 3, 4))
    fshape = f.shape[2:]
    return np.ascontiguousarray(f.reshape(f.shape[0], f.shape[1], -1).transpose(2, 0, 1)), fshape


def _from_spectra(f, fshape, spatial, crop):
    nb, nc = f.shape[1:]
    f = f.transpose(1, 2, 0).reshape((nb, nc) + fshape)
    out = sp_fft.irfftn(f, s=spatial, axes=(2, 3, 4))
    return np.ascontiguousarray(out[:, :, :crop[0], :crop[1], :crop[2]])


def _fft_forward(x, w):
    # circular correlation of size x.shape[2:] has no wrap-around on the valid region
    spatial = x.shape[2:]
    ksize = w.shape[2:]
    xf, fshape = _spectra(x, spatial)
    wf, _ = _spectra(w.astype(x.dtype, copy=False), spatial)   # (freq, cout, cin)
    yf = np.matmul(xf, np.ascontiguousarray(np.conj(wf).transpose(0, 2, 1)))
    crop = tuple(d - k + 1 for d, k in zip(spatial, ksize))
    return _from_spectra(yf, fshape, spatial, crop).astype(x.dtype, copy=False), (xf, wf, fshape)


def _fft_backward(grad_out, x, w, spectra, need_input_grad):
    xf, wf, fshape = spectra
    spatial = x.shape[2:]
    ksize = w.shape[2:]
    gf, _ = _spectra(grad_out, spatial)   # (freq, n, cout)
    gwf = np.matmul(np.ascontiguousarray(np.conj(gf).transpose(0, 2, 1)), xf)   # (freq, cout, cin)
    grad_w = _from_spectra(gwf, fshape, spatial, ksize).astype(grad_out.dtype, copy=False)
    grad_x = None
    if need_input_grad:
        gxf = np.matmul(gf, wf)   # (freq, n, cin)
        grad_x = _from_spectra(gxf, fshape, spatial, spatial).astype(grad_out.dtype, copy=False)
    return grad_x, grad_w


def _pick_method(x, w, method):
    if method == "auto":
        # GEMM wins for few input channels, FFT channel mixing for many
        return "fft" if x.shape[1] >= 8 else "gemm"
    if method not in ("fft", "gemm"):
        raise ValueError(f"unknown conv method {method!r}")
    return method


def conv3d_forward(x, w, b, method="auto"):
    """Stride-1, unpadded 3D cross-correlation plus bias.

    Parameters
    ----------
    x : ndarray, shape (n, cin, dx, dy, dz)
    w : ndarray, shape (cout, cin, kx, ky, kz)
    b : ndarray, shape (cout,)
    method : {"auto", "gemm", "fft"}
        Evaluation strategy; all give the same result up to rounding.

    Returns
    -------
    out : ndarray, shape (n, cout, dx-kx+1, dy-ky+1, dz-kz+1)
    cache : tuple
    """
    _check_5d(x)
    if w.ndim != 5 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"kernel shape {w.shape} does not match input channels {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} kernels")
    if any(d < k for d, k in zip(x.shape[2:], w.shape[2:])):
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} smaller than kernel {w.shape[2:]}")
    method = _pick_method(x, w, method)
    spectra = None
    if method == "fft":
        out, spectra = _fft_forward(x, w)
    else:
        out = _gemm_forward(x, w)
    out += b.astype(x.dtype, copy=False)[None, :, None, None, None]
    return out, (x, w, method, spectra)


def conv3d_backward(grad_out, cache, need_input_grad=True):
    """Gradients of :func:`conv3d_forward`.

    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when
    ``need_input_grad`` is False (first layer).
    """
    x, w, method, spectra = cache
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    if method == "fft":
        grad_x, grad_w = _fft_backward(grad_out, x, w, spectra, need_input_grad)
    else:
        grad_x, grad_w = _gemm_backward(grad_out, x, w, need_input_grad)
    return grad_x, grad_w, grad_b


def maxpool3d_forward(x, k=2):
    """Non-overlapping ``k``-cube max pooling; a trailing remainder is dropped."""
    _check_5d(x)
    n, c, dx, dy, dz = x.shape
    if min(dx, dy, dz) < k:
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} smaller than pooling window {k}")
    ox, oy, oz = dx // k, dy // k, dz // k
    blocks = x[:, :, :ox * k, :oy * k, :oz * k].reshape(n, c, ox, k, oy, k, oz, k)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, ox, oy, oz, k ** 3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, k)


def maxpool3d_backward(grad_out, cache):
    shape, idx, k = cache
    n, c = shape[:2]
    ox, oy, oz = idx.shape[2:]
    blocks = np.zeros((n, c, ox, oy, oz, k ** 3), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ox, oy, oz, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    grad_x = np.zeros(shape, dtype=grad_out.dtype)
    grad_x[:, :, :ox * k, :oy * k, :oz * k] = blocks.reshape(n, c, ox * k, oy * k, oz * k)
    return grad_x


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, training):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (momentum 0.1, unbiased variance).
    In eval mode the running statistics are used and nothing is mutated.
    """
    _check_5d(x)
    axes = (0, 2, 3, 4)
    shp = (1, -1, 1, 1, 1)
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise DegenerateBatch(f"need >= 2 values per channel in training mode, got {count}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = x - mean.astype(x.dtype).reshape(shp)
    xhat *= inv_std.reshape(shp)
    out = xhat * gamma.astype(x.dtype).reshape(shp)
    out += beta.astype(x.dtype).reshape(shp)
    return out, (xhat, inv_std, gamma)


def batchnorm3d_backward(grad_out, cache):
    """Training-mode gradient; returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3, 4)
    shp = (1, -1, 1, 1, 1)
    count = xhat.size // xhat.shape[1]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = (gamma.astype(grad_out.dtype) * inv_std / count).reshape(shp)
    grad_x = grad_out * count
    grad_x -= grad_beta.reshape(shp)
    grad_x -= xhat * grad_gamma.reshape(shp)
    grad_x *= scale
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(grad_out, mask):
    return grad_out * mask


def fc_forward(x, w, b):
    """Affine map ``y = x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False), (x, w)


def fc_backward(grad_out, cache):
    x, w = cache
    return grad_out @ w.astype(grad_out.dtype, copy=False), grad_out.T @ x, grad_out.sum(axis=0)


def l2normalize_forward(x):
    norm = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), L2_EPS)
    out = x / norm
    return out, (out, norm)


def l2normalize_backward(grad_out, cache):
    out, norm = cache
    # rows clamped at L2_EPS behave as a plain scaling
    proj = (grad_out * out).sum(axis=1, keepdims=True)
    clamped = (norm <= L2_EPS)
    proj = np.where(clamped, 0, proj)
    return (grad_out - out * proj) / norm


def softmax_xent(features, labels, w, b):
    """Mean softmax cross-entropy of a linear head over ``features``.

    Parameters
    ----------
    features : ndarray, shape (n, d)
    labels : int array, shape (n,)
    w : ndarray, shape (classes, d)
    b : ndarray, shape (classes,)

    Returns
    -------
    loss : float
    grads : tuple of (grad_features, grad_w, grad_b)
    """
    labels = np.asarray(labels)
    classes = w.shape[0]
    if labels.shape != (features.shape[0],):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {features.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelOutOfRange(f"labels must lie in [0, {classes})")
    logits, cache = fc_forward(features, w, b)
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = features.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1
    dlogits /= n
    return float(loss), fc_backward(dlogits, cache)
