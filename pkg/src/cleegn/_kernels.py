"""Convolution and batch-norm kernels in the internal time-innermost layout.

Every kernel here works on arrays laid out as (batch, height, feature, time),
i.e. the last logical axis of a Tensor4 swapped with the time axis, so the
innermost loops run over contiguous samples. ``pads`` is always the
(top, bottom, left, right) zero padding of the unpadded input.

Both a numba and a numpy implementation of each kernel live in this module so
the benchmark can compare them in one process; ``conv_forward`` and friends
point at whichever one ``CLEEGN_BACKEND`` selected.

Column kernels (width 1, e.g. a (C, 1) spatial filter) are matrix products
over a strided view of consecutive rows, which BLAS handles better than any
loop nest once the product is large enough. The input gradient of any
convolution is a correlation of the padded output gradient with the flipped,
transposed kernel, so it reuses the forward kernels.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._backend import BACKEND, HAVE_NUMBA, njit

# below this many multiply-adds per output sample the loop kernels beat BLAS
ROWS_MIN_WORK = 256


def _pad(x, pads):
    top, bottom, left, right = pads
    if not (top or bottom or left or right):
        return x
    b, h, f, w = x.shape
    xp = np.empty((b, h + top + bottom, f, w + left + right), dtype=x.dtype)
    xp[:, :top] = 0
    xp[:, top + h:] = 0
    xp[:, top:top + h, :, :left] = 0
    xp[:, top:top + h, :, left + w:] = 0
    xp[:, top:top + h, :, left:left + w] = x
    return xp


def _row_stack_view(xp, kh, h_out):
    # (B, H_out, kh*F, W): rows h..h+kh-1 of xp are contiguous in memory
    # strides are rebuilt from the shape: numpy may report arbitrary strides
    # for size-1 axes of a contiguous array
    xp = np.ascontiguousarray(xp)
    b, h, f, w = xp.shape
    item = xp.itemsize
    return as_strided(xp, (b, h_out, kh * f, w), (h * f * w * item, f * w * item, w * item, item),
                      writeable=False)


def flip_kernel(w):
    """(K, kh, kw, F) -> (F, kh, kw, K) reversed in both spatial axes."""
    return np.ascontiguousarray(w[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))


def transposed_pads(w, pads):
    kh, kw = w.shape[1], w.shape[2]
    top, bottom, left, right = pads
    return kh - 1 - top, kh - 1 - bottom, kw - 1 - left, kw - 1 - right


def conv_forward_rows(x, w, b, pads, h_out, w_out):
    n_k, kh, _, n_f = w.shape
    xp = _pad(x, (pads[0], pads[1], 0, 0))
    out = np.matmul(w.reshape(n_k, kh * n_f), _row_stack_view(xp, kh, h_out))
    out += b[:, None]
    return out


def conv_backward_weight_rows(x, g, pads, kh, kw):
    n_k, n_f = g.shape[2], x.shape[2]
    xp = _pad(x, (pads[0], pads[1], 0, 0))
    v = _row_stack_view(xp, kh, g.shape[1])
    gw = np.matmul(g, v.transpose(0, 1, 3, 2)).sum(axis=(0, 1))
    return gw.reshape(n_k, kh, 1, n_f)


def _use_rows(w):
    n_k, kh, kw, n_f = w.shape
    return kw == 1 and n_k * kh * n_f >= ROWS_MIN_WORK


# -- numpy --------------------------------------------------------------------


def conv_forward_numpy(x, w, b, pads, h_out, w_out):
    n_k, kh, kw, _ = w.shape
    if kw == 1:
        return conv_forward_rows(x, w, b, pads, h_out, w_out)
    xp = _pad(x, pads)
    out = np.empty((x.shape[0], h_out, n_k, w_out), dtype=x.dtype)
    out[...] = b[:, None]
    for i in range(kh):
        for j in range(kw):
            out += np.matmul(w[:, i, j, :], xp[:, i:i + h_out, :, j:j + w_out])
    return out


def conv_backward_weight_numpy(x, g, pads, kh, kw):
    if kw == 1:
        return conv_backward_weight_rows(x, g, pads, kh, kw)
    xp = _pad(x, pads)
    n_b, h_out, n_k, w_out = g.shape
    n_f = x.shape[2]
    gw = np.empty((n_k, kh, kw, n_f), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i:i + h_out, :, j:j + w_out]
            gw[:, i, j, :] = np.tensordot(g, xs, axes=([0, 1, 3], [0, 1, 3]))
    return gw


def conv_backward_input_numpy(g, w, pads, h_in, w_in):
    wf = flip_kernel(w)
    return conv_forward_numpy(g, wf, np.zeros(wf.shape[0], g.dtype), transposed_pads(w, pads), h_in, w_in)


# -- numba --------------------------------------------------------------------
# Height padding is implicit (out-of-range rows are skipped); time padding is
# materialized by the wrappers so every inner index is non-negative, which is
# what lets LLVM vectorize the sample loops. Taps are consumed four at a time
# so each output sample is loaded and stored once per four multiply-adds.


def _pad_time(x, left, right):
    if not (left or right):
        return x
    b, h, f, w = x.shape
    xp = np.empty((b, h, f, w + left + right), dtype=x.dtype)
    xp[:, :, :, :left] = 0
    xp[:, :, :, left + w:] = 0
    xp[:, :, :, left:left + w] = x
    return xp


@njit(cache=True)
def _conv_forward_jit(xt, w, b, top, h_out, w_out):
    n_b, n_h = xt.shape[0], xt.shape[1]
    n_k, kh, kw, n_f = w.shape
    out = np.empty((n_b, h_out, n_k, w_out), dtype=xt.dtype)
    kw4 = kw - kw % 4
    for bb in range(n_b):
        for h in range(h_out):
            for k in range(n_k):
                o = out[bb, h, k]
                o[:] = b[k]
                for i in range(kh):
                    hi = h + i - top
                    if hi < 0 or hi >= n_h:
                        continue
                    for f in range(n_f):
                        xr = xt[bb, hi, f]
                        for j in range(0, kw4, 4):
                            w0 = w[k, i, j, f]
                            w1 = w[k, i, j + 1, f]
                            w2 = w[k, i, j + 2, f]
                            w3 = w[k, i, j + 3, f]
                            for t in range(w_out):
                                o[t] += w0 * xr[t + j] + w1 * xr[t + j + 1] + w2 * xr[t + j + 2] + w3 * xr[t + j + 3]
                        for j in range(kw4, kw):
                            wv = w[k, i, j, f]
                            for t in range(w_out):
                                o[t] += wv * xr[t + j]
    return out


# reassociation lets LLVM vectorize the dot products; order is still fixed per build
@njit(cache=True, fastmath={"reassoc", "nsz"})
def _conv_backward_weight_jit(xt, g, top, kh, kw):
    n_b, h_out, n_k, w_out = g.shape
    n_h, n_f = xt.shape[1], xt.shape[2]
    gw = np.zeros((n_k, kh, kw, n_f), dtype=g.dtype)
    zero = gw[0, 0, 0, 0]
    kw4 = kw - kw % 4
    for bb in range(n_b):
        for h in range(h_out):
            for k in range(n_k):
                gr = g[bb, h, k]
                for i in range(kh):
                    hi = h + i - top
                    if hi < 0 or hi >= n_h:
                        continue
                    for f in range(n_f):
                        xr = xt[bb, hi, f]
                        for j in range(0, kw4, 4):
                            a0 = zero
                            a1 = zero
                            a2 = zero
                            a3 = zero
                            for t in range(w_out):
                                gv = gr[t]
                                a0 += gv * xr[t + j]
                                a1 += gv * xr[t + j + 1]
                                a2 += gv * xr[t + j + 2]
                                a3 += gv * xr[t + j + 3]
                            gw[k, i, j, f] += a0
                            gw[k, i, j + 1, f] += a1
                            gw[k, i, j + 2, f] += a2
                            gw[k, i, j + 3, f] += a3
                        for j in range(kw4, kw):
                            acc = zero
                            for t in range(w_out):
                                acc += gr[t] * xr[t + j]
                            gw[k, i, j, f] += acc
    return gw


def conv_forward_numba(x, w, b, pads, h_out, w_out):
    if _use_rows(w):
        return conv_forward_rows(x, w, b, pads, h_out, w_out)
    return _conv_forward_jit(_pad_time(x, pads[2], pads[3]), w, b, pads[0], h_out, w_out)


def conv_backward_weight_numba(x, g, pads, kh, kw):
    if kw == 1 and g.shape[2] * kh * x.shape[2] >= ROWS_MIN_WORK:
        return conv_backward_weight_rows(x, g, pads, kh, kw)
    return _conv_backward_weight_jit(_pad_time(x, pads[2], pads[3]), g, pads[0], kh, kw)


def conv_backward_input_numba(g, w, pads, h_in, w_in):
    wf = flip_kernel(w)
    return conv_forward_numba(g, wf, np.zeros(wf.shape[0], g.dtype), transposed_pads(w, pads), h_in, w_in)


# -- batch normalization over (batch, height, time) per feature ------------------


def bn_train_forward_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 1, 3), dtype=np.float64)
    centered = x - mean.astype(x.dtype)[:, None]
    var = np.square(centered, dtype=np.float64).mean(axis=(0, 1, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = centered * inv_std[:, None]
    out = x_hat * gamma[:, None] + beta[:, None]
    return out, x_hat, mean.astype(x.dtype), var.astype(x.dtype), inv_std


def bn_backward_numpy(x_hat, g, gamma, inv_std):
    n = x_hat.shape[0] * x_hat.shape[1] * x_hat.shape[3]
    grad_beta = g.sum(axis=(0, 1, 3), dtype=np.float64).astype(g.dtype)
    grad_gamma = (g * x_hat).sum(axis=(0, 1, 3), dtype=np.float64).astype(g.dtype)
    scale = (gamma * inv_std / n)[:, None]
    gx = scale * (n * g - grad_beta[:, None] - x_hat * grad_gamma[:, None])
    return gx.astype(x_hat.dtype), grad_gamma, grad_beta


# Row sums run in the array dtype (so they vectorize) and are accumulated
# across rows in float64.
@njit(cache=True, fastmath={"reassoc", "nsz"})
def bn_train_forward_numba(x, gamma, beta, eps):
    n_b, n_h, n_f, n_t = x.shape
    n = n_b * n_h * n_t
    zero = np.zeros(1, dtype=x.dtype)[0]
    mean = np.zeros(n_f, dtype=np.float64)
    var = np.zeros(n_f, dtype=np.float64)
    for b in range(n_b):
        for h in range(n_h):
            for f in range(n_f):
                xr = x[b, h, f]
                s = zero
                for t in range(n_t):
                    s += xr[t]
                mean[f] += s
    mean /= n
    mean_c = mean.astype(x.dtype)
    for b in range(n_b):
        for h in range(n_h):
            for f in range(n_f):
                xr = x[b, h, f]
                m = mean_c[f]
                s = zero
                for t in range(n_t):
                    d = xr[t] - m
                    s += d * d
                var[f] += s
    var /= n
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(n_b):
        for h in range(n_h):
            for f in range(n_f):
                m, s, gm, bt = mean_c[f], inv_std[f], gamma[f], beta[f]
                xh = x_hat[b, h, f]
                o = out[b, h, f]
                xr = x[b, h, f]
                for t in range(n_t):
                    v = (xr[t] - m) * s
                    xh[t] = v
                    o[t] = v * gm + bt
    return out, x_hat, mean_c, var.astype(x.dtype), inv_std


@njit(cache=True, fastmath={"reassoc", "nsz"})
def bn_backward_numba(x_hat, g, gamma, inv_std):
    n_b, n_h, n_f, n_t = x_hat.shape
    n = n_b * n_h * n_t
    zero = np.zeros(1, dtype=x_hat.dtype)[0]
    sum_g = np.zeros(n_f, dtype=np.float64)
    sum_gx = np.zeros(n_f, dtype=np.float64)
    for b in range(n_b):
        for h in range(n_h):
            for f in range(n_f):
                gr = g[b, h, f]
                xr = x_hat[b, h, f]
                s1 = zero
                s2 = zero
                for t in range(n_t):
                    s1 += gr[t]
                    s2 += gr[t] * xr[t]
                sum_g[f] += s1
                sum_gx[f] += s2
    grad_beta = sum_g.astype(x_hat.dtype)
    grad_gamma = sum_gx.astype(x_hat.dtype)
    gx = np.empty_like(x_hat)
    for b in range(n_b):
        for h in range(n_h):
            for f in range(n_f):
                scale = gamma[f] * inv_std[f] / n
                mg = grad_beta[f]
                mgx = grad_gamma[f]
                gr = g[b, h, f]
                xr = x_hat[b, h, f]
                dst = gx[b, h, f]
                for t in range(n_t):
                    dst[t] = scale * (n * gr[t] - mg - xr[t] * mgx)
    return gx, grad_gamma, grad_beta


NUMPY_KERNELS = {
    "conv_forward": conv_forward_numpy,
    "conv_backward_input": conv_backward_input_numpy,
    "conv_backward_weight": conv_backward_weight_numpy,
    "bn_train_forward": bn_train_forward_numpy,
    "bn_backward": bn_backward_numpy,
}
NUMBA_KERNELS = {
    "conv_forward": conv_forward_numba,
    "conv_backward_input": conv_backward_input_numba,
    "conv_backward_weight": conv_backward_weight_numba,
    "bn_train_forward": bn_train_forward_numba,
    "bn_backward": bn_backward_numba,
}

_active = NUMBA_KERNELS if HAVE_NUMBA else NUMPY_KERNELS
conv_forward = _active["conv_forward"]
conv_backward_input = _active["conv_backward_input"]
conv_backward_weight = _active["conv_backward_weight"]
bn_train_forward = _active["bn_train_forward"]
bn_backward = _active["bn_backward"]

__all__ = ["BACKEND", "conv_forward", "conv_backward_input", "conv_backward_weight", "bn_train_forward", "bn_backward"]
