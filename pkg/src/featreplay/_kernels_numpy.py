"""Pure-numpy fallbacks for the compiled kernels.

Accumulation order matches ``_kernels_numba`` term for term, so both backends
produce bit-identical results.
"""
import numpy as np


def matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    tmp = np.empty_like(out)
    for p in range(a.shape[1]):
        np.multiply(a[:, p, None], b[p], out=tmp)
        out += tmp
    return out


def _window(xp, i, j, ho, wo, stride):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d_forward(xp, w, bias, stride):
    n_batch, c_in, hp, wp = xp.shape
    c_out, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n_batch, c_out, ho, wo))
    for c in range(c_in):
        for i in range(kh):
            for j in range(kw):
                win = _window(xp, i, j, ho, wo, stride)[:, c]
                out += w[None, :, c, i, j, None, None] * win[:, None]
    out += bias[None, :, None, None]
    return out


def conv2d_backward_weight(xp, upstream, kh, kw, stride):
    c_in = xp.shape[1]
    c_out, ho, wo = upstream.shape[1:]
    dw = np.zeros((c_out, c_in, kh, kw))
    u = upstream.transpose(1, 0, 2, 3).reshape(c_out, -1)
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, ho, wo, stride).transpose(1, 0, 2, 3).reshape(c_in, -1)
            # sequential over (n, y, x), same as the compiled kernel
            acc = np.zeros((c_out, c_in))
            for q in range(u.shape[1]):
                acc += u[:, q, None] * win[None, :, q]
            dw[:, :, i, j] = acc
    return dw


def conv2d_backward_input(w, upstream, padded_shape, stride):
    c_out, c_in, kh, kw = w.shape
    ho, wo = upstream.shape[2:]
    dxp = np.zeros(padded_shape)
    for o in range(c_out):
        for i in range(kh):
            for j in range(kw):
                win = _window(dxp, i, j, ho, wo, stride)
                win += w[None, o, :, i, j, None, None] * upstream[:, o, None]
    return dxp
