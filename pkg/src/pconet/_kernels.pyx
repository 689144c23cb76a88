# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Direct loop-nest kernels for NHWC valid convolution and 2x2/s2 max pooling.

Every output element is accumulated serially in a fixed tap order and
parallel workers own disjoint output slabs, so results are bitwise
identical for any thread count. Supports float32 and float64.

Inner loops run over the contiguous channel axis so the C compiler can
vectorize them without reassociating any reduction.
"""

import numpy as np

from cython.parallel cimport prange

ctypedef fused real:
    float
    double

ctypedef Py_ssize_t isize

DEF MAX_COUT = 1024


cdef void _conv_fwd_row(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k,
                        const real[::1] bias, real[:, :, :, ::1] out,
                        isize b, isize r, isize stride) noexcept nogil:
    cdef isize ow = out.shape[2], cout = out.shape[3]
    cdef isize kh = k.shape[0], kw = k.shape[1], cin = k.shape[2]
    cdef isize c, p, q, ci, co, ih, iw
    cdef real xv
    cdef real acc[MAX_COUT]
    for c in range(ow):
        for co in range(cout):
            acc[co] = bias[co]
        for p in range(kh):
            ih = r * stride + p
            for q in range(kw):
                iw = c * stride + q
                for ci in range(cin):
                    xv = x[b, ih, iw, ci]
                    for co in range(cout):
                        acc[co] += xv * k[p, q, ci, co]
        for co in range(cout):
            out[b, r, c, co] = acc[co]


cdef void _conv_bwd_input_row(const real[:, :, :, ::1] kt, const real[:, :, :, ::1] gout,
                              real[:, :, :, ::1] gin, isize b, isize ih,
                              isize stride) noexcept nogil:
    # kt is the kernel transposed to (kh, kw, cout, cin) so the inner
    # accumulation runs over the contiguous cin axis.
    cdef isize w = gin.shape[2], cin = gin.shape[3]
    cdef isize kh = kt.shape[0], kw = kt.shape[1], cout = kt.shape[2]
    cdef isize oh = gout.shape[1], ow = gout.shape[2]
    cdef isize iw, ci, p, q, co, t, u, r, c
    cdef real g
    for iw in range(w):
        for ci in range(cin):
            gin[b, ih, iw, ci] = 0
    for p in range(kh):
        t = ih - p
        if t < 0:
            break
        if t % stride != 0:
            continue
        r = t // stride
        if r >= oh:
            continue
        for iw in range(w):
            for q in range(kw):
                u = iw - q
                if u < 0:
                    break
                if u % stride != 0:
                    continue
                c = u // stride
                if c >= ow:
                    continue
                for co in range(cout):
                    g = gout[b, r, c, co]
                    for ci in range(cin):
                        gin[b, ih, iw, ci] += g * kt[p, q, co, ci]


cdef void _conv_bwd_kernel_tap(const real[:, :, :, ::1] x, const real[:, :, :, ::1] gout,
                               double[:, :, :, ::1] gk, isize p, isize q,
                               isize stride) noexcept nogil:
    # float64 accumulator: kernel gradients sum over every output pixel,
    # so float32 accumulation order would visibly diverge between backends
    cdef isize n = gout.shape[0], oh = gout.shape[1], ow = gout.shape[2], cout = gout.shape[3]
    cdef isize cin = x.shape[3]
    cdef isize b, r, c, ci, co
    cdef double xv
    for b in range(n):
        for r in range(oh):
            for c in range(ow):
                for ci in range(cin):
                    xv = <double> x[b, r * stride + p, c * stride + q, ci]
                    for co in range(cout):
                        gk[p, q, ci, co] += xv * gout[b, r, c, co]


cdef void _maxpool_row(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                       long long[:, :, :, ::1] idx, isize b, isize r) noexcept nogil:
    cdef isize h = x.shape[1], w = x.shape[2], nc = x.shape[3]
    cdef isize ow = out.shape[2]
    cdef isize c, ch, dh, dw, ih, iw, bi, bj
    cdef real v, best
    for c in range(ow):
        for ch in range(nc):
            # strict > keeps the first maximum in (dh, dw) scan order
            best = x[b, 2 * r, 2 * c, ch]
            bi = 2 * r
            bj = 2 * c
            for dh in range(2):
                for dw in range(2):
                    ih = 2 * r + dh
                    iw = 2 * c + dw
                    v = x[b, ih, iw, ch]
                    if v > best:
                        best = v
                        bi = ih
                        bj = iw
            out[b, r, c, ch] = best
            idx[b, r, c, ch] = ((b * h + bi) * w + bj) * nc + ch


def conv2d_forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k,
                   const real[::1] bias, int stride, int threads):
    cdef isize n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef isize kh = k.shape[0], kw = k.shape[1], cout = k.shape[3]
    if cout > MAX_COUT:
        raise ValueError(f"compiled kernel supports at most {MAX_COUT} output channels")
    cdef isize oh = (h - kh) // stride + 1
    cdef isize ow = (w - kw) // stride + 1
    out_np = np.empty((n, oh, ow, cout), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef isize i, s = stride
    cdef int nt = threads if threads > 0 else 1
    for i in prange(n * oh, nogil=True, num_threads=nt, schedule="static"):
        _conv_fwd_row(x, k, bias, out, i // oh, i % oh, s)
    return out_np


def conv2d_backward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k,
                    const real[:, :, :, ::1] gout, int stride, int threads,
                    bint need_input_grad=True):
    cdef isize n = x.shape[0], h = x.shape[1], w = x.shape[2], cin = x.shape[3]
    cdef isize kh = k.shape[0], kw = k.shape[1], cout = k.shape[3]
    dtype = np.float32 if real is float else np.float64
    gk64_np = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] gk64 = gk64_np
    cdef real[:, :, :, ::1] gin
    cdef const real[:, :, :, ::1] kt
    cdef isize i, s = stride
    cdef int nt = threads if threads > 0 else 1
    gin_np = None
    if need_input_grad:
        kt_np = np.ascontiguousarray(np.transpose(np.asarray(k), (0, 1, 3, 2)))
        gin_np = np.empty((n, h, w, cin), dtype=dtype)
        kt = kt_np
        gin = gin_np
        for i in prange(n * h, nogil=True, num_threads=nt, schedule="static"):
            _conv_bwd_input_row(kt, gout, gin, i // h, i % h, s)
    for i in prange(kh * kw, nogil=True, num_threads=nt, schedule="static"):
        _conv_bwd_kernel_tap(x, gout, gk64, i // kw, i % kw, s)
    return gin_np, gk64_np.astype(dtype)


def maxpool2d_forward(const real[:, :, :, ::1] x, int threads):
    cdef isize n = x.shape[0], h = x.shape[1], w = x.shape[2], nc = x.shape[3]
    cdef isize oh = h // 2, ow = w // 2
    out_np = np.empty((n, oh, ow, nc), dtype=np.float32 if real is float else np.float64)
    idx_np = np.empty((n, oh, ow, nc), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_np
    cdef long long[:, :, :, ::1] idx = idx_np
    cdef isize i
    cdef int nt = threads if threads > 0 else 1
    for i in prange(n * oh, nogil=True, num_threads=nt, schedule="static"):
        _maxpool_row(x, out, idx, i // oh, i % oh)
    return out_np, idx_np
