"""Pure-NumPy fallback kernels: im2col + BLAS matmul convolution and
reshape-based 2x2/s2 max pooling.

Must agree with the compiled direct-loop kernels within 1e-5 relative
(float reassociation only); the argmax tie rule (first maximum in
(dh, dw) scan order) matches them exactly.
"""

import numpy as np


def _im2col(x, kh, kw, stride):
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, :, p, q, :] = x[:, p:p + oh * stride:stride, q:q + ow * stride:stride, :]
    return cols


def conv2d_forward(x, kernels, bias, stride, threads):
    kh, kw, cin, cout = kernels.shape
    cols = _im2col(x, kh, kw, stride)
    n, oh, ow = cols.shape[:3]
    out = cols.reshape(n * oh * ow, kh * kw * cin) @ kernels.reshape(kh * kw * cin, cout)
    out += bias
    return out.reshape(n, oh, ow, cout)


def conv2d_backward(x, kernels, gout, stride, threads, need_input_grad=True):
    kh, kw, cin, cout = kernels.shape
    n, oh, ow, _ = gout.shape
    g2 = gout.reshape(n * oh * ow, cout)
    cols = _im2col(x, kh, kw, stride).reshape(n * oh * ow, kh * kw * cin)
    gk = (cols.T @ g2).reshape(kh, kw, cin, cout)
    if not need_input_grad:
        return None, gk
    gcols = (g2 @ kernels.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    gin = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            gin[:, p:p + oh * stride:stride, q:q + ow * stride:stride, :] += gcols[:, :, :, p, q, :]
    return gin, gk


def maxpool2d_forward(x, threads):
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    windows = (
        x[:, :oh * 2, :ow * 2, :]
        .reshape(n, oh, 2, ow, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, oh, ow, c, 4)
    )
    local = windows.argmax(axis=4)
    out = np.take_along_axis(windows, local[..., None], axis=4)[..., 0]
    ih = 2 * np.arange(oh)[None, :, None, None] + local // 2
    iw = 2 * np.arange(ow)[None, None, :, None] + local % 2
    b = np.arange(n)[:, None, None, None]
    ch = np.arange(c)[None, None, None, :]
    idx = ((b * h + ih) * w + iw) * c + ch
    return out, idx.astype(np.int64)
