# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels; mirrors ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, :, ::1] xp, kernel, stride, out_shape):
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t od = out_shape[0], oh = out_shape[1], ow = out_shape[2]
    cdef Py_ssize_t n = xp.shape[0], ch = xp.shape[4]
    cols = np.empty((n * od * oh * ow, kd * kh * kw * ch))
    cdef double[:, ::1] cv = cols
    cdef Py_ssize_t b, i, j, k, a, p, q, c, row, col
    with nogil:
        row = 0
        for b in range(n):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        col = 0
                        for a in range(kd):
                            for p in range(kh):
                                for q in range(kw):
                                    for c in range(ch):
                                        cv[row, col] = xp[b, i * sd + a, j * sh + p, k * sw + q, c]
                                        col += 1
                        row += 1
    return cols.reshape((n, od, oh, ow, kd, kh, kw, ch))


def col2im(cols8, padded_shape, kernel, stride):
    cdef Py_ssize_t kd = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t n = cols8.shape[0], od = cols8.shape[1], oh = cols8.shape[2], ow = cols8.shape[3]
    cdef Py_ssize_t ch = cols8.shape[7]
    cdef const double[:, ::1] cols = np.ascontiguousarray(cols8).reshape((n * od * oh * ow, kd * kh * kw * ch))
    cdef Py_ssize_t row, col
    out = np.zeros(padded_shape)
    cdef double[:, :, :, :, ::1] ov = out
    cdef Py_ssize_t b, i, j, k, a, p, q, c
    # offset-major order matches the numpy fallback's accumulation order
    with nogil:
        for a in range(kd):
            for p in range(kh):
                for q in range(kw):
                    row = 0
                    for b in range(n):
                        for i in range(od):
                            for j in range(oh):
                                for k in range(ow):
                                    col = ((a * kh + p) * kw + q) * ch
                                    for c in range(ch):
                                        ov[b, i * sd + a, j * sh + p, k * sw + q, c] += cols[row, col + c]
                                    row += 1
    return out


def maxpool_forward(const double[:, :, :, :, ::1] xp, window, stride, out_shape):
    cdef Py_ssize_t kd = window[0], kh = window[1], kw = window[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t od = out_shape[0], oh = out_shape[1], ow = out_shape[2]
    cdef Py_ssize_t n = xp.shape[0], ch = xp.shape[4]
    out = np.empty((n, od, oh, ow, ch))
    arg = np.empty((n, od, oh, ow, ch), dtype=np.int64)
    cdef double[:, :, :, :, ::1] ov = out
    cdef long long[:, :, :, :, ::1] av = arg
    cdef Py_ssize_t b, i, j, k, a, p, q, c, idx, best_idx
    cdef double v, best
    with nogil:
        for b in range(n):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        for c in range(ch):
                            best = xp[b, i * sd, j * sh, k * sw, c]
                            best_idx = 0
                            idx = 0
                            for a in range(kd):
                                for p in range(kh):
                                    for q in range(kw):
                                        v = xp[b, i * sd + a, j * sh + p, k * sw + q, c]
                                        if v > best:
                                            best = v
                                            best_idx = idx
                                        idx += 1
                            ov[b, i, j, k, c] = best
                            av[b, i, j, k, c] = best_idx
    return out, arg


def maxpool_backward(const double[:, :, :, :, ::1] grad_out, const long long[:, :, :, :, ::1] argmax,
                     padded_shape, window, stride):
    cdef Py_ssize_t kd = window[0], kh = window[1], kw = window[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t n = grad_out.shape[0], od = grad_out.shape[1], oh = grad_out.shape[2]
    cdef Py_ssize_t ow = grad_out.shape[3], ch = grad_out.shape[4]
    out = np.zeros(padded_shape)
    cdef double[:, :, :, :, ::1] gv = out
    cdef Py_ssize_t b, i, j, k, a, p, q, c, idx
    with nogil:
        idx = 0
        for a in range(kd):
            for p in range(kh):
                for q in range(kw):
                    for b in range(n):
                        for i in range(od):
                            for j in range(oh):
                                for k in range(ow):
                                    for c in range(ch):
                                        if argmax[b, i, j, k, c] == idx:
                                            gv[b, i * sd + a, j * sh + p, k * sw + q, c] += grad_out[b, i, j, k, c]
                    idx += 1
    return out
