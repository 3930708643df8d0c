# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im kernels (hot data-movement loops of conv2d)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

NAME = "cython"


def im2col(xp, int k, int stride, int out_h, int out_w):
    return _im2col(xp, k, stride, out_h, out_w)


def col2im(cols, int c, int k, int stride, int hp, int wp, int out_h, int out_w):
    return _col2im(cols, c, k, stride, hp, wp, out_h, out_w)


def _im2col(real[:, :, :, ::1] xp, int k, int stride, int out_h, int out_w):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, row
    out = np.empty((b, c * k * k, out_h * out_w),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] o = out
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for oi in range(out_h):
                        for oj in range(out_w):
                            o[bi, row, oi * out_w + oj] = xp[
                                bi, ci, oi * stride + ki, oj * stride + kj]
    return out


def _col2im(real[:, :, ::1] cols, int c, int k, int stride, int hp, int wp,
            int out_h, int out_w):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, row
    out = np.zeros((b, c, hp, wp),
                   dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] o = out
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for oi in range(out_h):
                        for oj in range(out_w):
                            o[bi, ci, oi * stride + ki, oj * stride + kj] += cols[
                                bi, row, oi * out_w + oj]
    return out
