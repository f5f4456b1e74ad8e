# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: 1-d convolution forward/backward and the nearest
codebook search.  Semantics mirror np_backend exactly (including the
lowest-index tie break); parity is enforced by tests/test_kernels.py.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv1d_forward(real[:, :, ::1] x, real[:, :, ::1] w,
                   int stride, int dilation, int padding):
    cdef Py_ssize_t b_n = x.shape[0], ci = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t t_out = (t + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b_n, co, t_out), dtype=dtype)
    cdef real[:, :, ::1] y = out_arr
    cdef Py_ssize_t b, o, c, to, j, pos
    cdef real acc
    for b in range(b_n):
        for o in range(co):
            for to in range(t_out):
                acc = 0
                for c in range(ci):
                    for j in range(k):
                        pos = to * stride + j * dilation - padding
                        if 0 <= pos < t:
                            acc += x[b, c, pos] * w[o, c, j]
                y[b, o, to] = acc
    return out_arr


def conv1d_backward_x(real[:, :, ::1] gy, real[:, :, ::1] w,
                      int stride, int dilation, int padding, int t_in):
    cdef Py_ssize_t b_n = gy.shape[0], co = gy.shape[0 + 1], t_out = gy.shape[2]
    cdef Py_ssize_t ci = w.shape[1], k = w.shape[2]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((b_n, ci, t_in), dtype=dtype)
    cdef real[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, c, to, j, pos
    cdef real g
    for b in range(b_n):
        for o in range(co):
            for to in range(t_out):
                g = gy[b, o, to]
                for c in range(ci):
                    for j in range(k):
                        pos = to * stride + j * dilation - padding
                        if 0 <= pos < t_in:
                            gx[b, c, pos] += g * w[o, c, j]
    return gx_arr


def conv1d_backward_w(real[:, :, ::1] gy, real[:, :, ::1] x,
                      int stride, int dilation, int padding, int k):
    cdef Py_ssize_t b_n = gy.shape[0], co = gy.shape[1], t_out = gy.shape[2]
    cdef Py_ssize_t ci = x.shape[1], t = x.shape[2]
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gw_arr = np.zeros((co, ci, k), dtype=dtype)
    cdef real[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, to, j, pos
    cdef real g
    for b in range(b_n):
        for o in range(co):
            for to in range(t_out):
                g = gy[b, o, to]
                for c in range(ci):
                    for j in range(k):
                        pos = to * stride + j * dilation - padding
                        if 0 <= pos < t:
                            gw[o, c, j] += g * x[b, c, pos]
    return gw_arr


def nearest_codes(real[:, ::1] z, real[:, ::1] entries):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], kk = entries.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, k, j
    cdef real best, dist, diff
    cdef Py_ssize_t best_k
    for i in range(n):
        best = 0
        best_k = 0
        for k in range(kk):
            dist = 0
            for j in range(d):
                diff = z[i, j] - entries[k, j]
                dist += diff * diff
            if k == 0 or dist < best:
                best = dist
                best_k = k
        out[i] = best_k
    return out_arr
