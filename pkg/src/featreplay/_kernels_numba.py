"""Compiled inner loops. Every reduction runs in a fixed order so results are
bit-identical across runs and thread counts."""
import numba as nb
import numpy as np

_opts = dict(nopython=True, nogil=True, cache=True)


@nb.jit(**_opts)
def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    # i-p-j order: each out[i, j] still accumulates p = 0..k-1 left to right
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


@nb.jit(**_opts)
def conv2d_forward(xp, w, bias, stride):
    n_batch, c_in, hp, wp = xp.shape
    c_out, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n_batch, c_out, ho, wo))
    for n in range(n_batch):
        for o in range(c_out):
            for c in range(c_in):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            for x in range(wo):
                                out[n, o, y, x] += wv * xp[n, c, y * stride + i, x * stride + j]
            for y in range(ho):
                for x in range(wo):
                    out[n, o, y, x] += bias[o]
    return out


@nb.jit(**_opts)
def conv2d_backward_weight(xp, upstream, kh, kw, stride):
    n_batch, c_in = xp.shape[0], xp.shape[1]
    c_out, ho, wo = upstream.shape[1], upstream.shape[2], upstream.shape[3]
    dw = np.zeros((c_out, c_in, kh, kw))
    for o in range(c_out):
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for n in range(n_batch):
                        for y in range(ho):
                            for x in range(wo):
                                acc += upstream[n, o, y, x] * xp[n, c, y * stride + i, x * stride + j]
                    dw[o, c, i, j] = acc
    return dw


@nb.jit(**_opts)
def conv2d_backward_input(w, upstream, padded_shape, stride):
    n_batch, c_out, ho, wo = upstream.shape
    c_in, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros(padded_shape)
    for n in range(n_batch):
        for c in range(c_in):
            for o in range(c_out):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            for x in range(wo):
                                dxp[n, c, y * stride + i, x * stride + j] += wv * upstream[n, o, y, x]
    return dxp
