# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the hot kernels in ``_pykernels``.

Same signatures and semantics; single tight loop per kernel, no
intermediate allocations.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def dw_conv1d_forward(double[:, :, ::1] x, double[:, ::1] taps,
                      int dilation, int pad_left):
    cdef Py_ssize_t b = x.shape[0], n = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t k = taps.shape[0]
    out = np.zeros((b, n, d), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t i, t, c, j, idx
    cdef double acc
    for i in range(b):
        for t in range(n):
            for c in range(d):
                acc = 0.0
                for j in range(k):
                    idx = t + j * dilation - pad_left
                    if 0 <= idx < n:
                        acc += x[i, idx, c] * taps[j, c]
                y[i, t, c] = acc
    return out


def dw_conv1d_backward(double[:, :, ::1] x, double[:, ::1] taps,
                       double[:, :, ::1] dy, int dilation, int pad_left):
    cdef Py_ssize_t b = x.shape[0], n = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t k = taps.shape[0]
    dx_arr = np.zeros((b, n, d), dtype=np.float64)
    dtaps_arr = np.zeros((k, d), dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, ::1] dtaps = dtaps_arr
    cdef Py_ssize_t i, t, c, j, idx
    cdef double g
    for j in range(k):
        for i in range(b):
            for t in range(n):
                idx = t + j * dilation - pad_left
                if 0 <= idx < n:
                    for c in range(d):
                        g = dy[i, t, c]
                        dx[i, idx, c] += g * taps[j, c]
                        dtaps[j, c] += x[i, idx, c] * g
    return dx_arr, dtaps_arr


def scatter_add_rows(double[:, ::1] out, long long[::1] ids,
                     double[:, ::1] rows):
    cdef Py_ssize_t r = ids.shape[0], d = out.shape[1]
    cdef Py_ssize_t i, c, row
    for i in range(r):
        row = <Py_ssize_t> ids[i]
        for c in range(d):
            out[row, c] += rows[i, c]


def masked_softmax(double[:, ::1] logits, mask):
    cdef Py_ssize_t r = logits.shape[0], n = logits.shape[1]
    out = np.empty((r, n), dtype=np.float64)
    cdef double[:, ::1] w = out
    cdef unsigned char[:, ::1] m
    cdef bint has_mask = mask is not None
    if has_mask:
        m = mask
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    for i in range(r):
        mx = -INFINITY
        for j in range(n):
            if not has_mask or m[i, j]:
                if logits[i, j] > mx:
                    mx = logits[i, j]
        s = 0.0
        for j in range(n):
            if not has_mask or m[i, j]:
                v = exp(logits[i, j] - mx)
            else:
                v = 0.0
            w[i, j] = v
            s += v
        for j in range(n):
            w[i, j] /= s
    return out


def softmax_backward(double[:, ::1] w, double[:, ::1] dy):
    cdef Py_ssize_t r = w.shape[0], n = w.shape[1]
    out = np.empty((r, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(r):
        inner = 0.0
        for j in range(n):
            inner += w[i, j] * dy[i, j]
        for j in range(n):
            dx[i, j] = w[i, j] * (dy[i, j] - inner)
    return out


def layer_norm_forward(double[:, ::1] x, double[::1] gain,
                       double[::1] bias, double eps):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    y_arr = np.empty((r, d), dtype=np.float64)
    xhat_arr = np.empty((r, d), dtype=np.float64)
    rstd_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef Py_ssize_t i, c
    cdef double mu, var, rs, h
    for i in range(r):
        mu = 0.0
        for c in range(d):
            mu += x[i, c]
        mu /= d
        var = 0.0
        for c in range(d):
            var += (x[i, c] - mu) * (x[i, c] - mu)
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = rs
        for c in range(d):
            h = (x[i, c] - mu) * rs
            xhat[i, c] = h
            y[i, c] = h * gain[c] + bias[c]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(double[:, ::1] xhat, double[::1] rstd,
                        double[::1] gain, double[:, ::1] dy):
    cdef Py_ssize_t r = xhat.shape[0], d = xhat.shape[1]
    dx_arr = np.empty((r, d), dtype=np.float64)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef Py_ssize_t i, c
    cdef double m1, m2, g
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for c in range(d):
            g = dy[i, c] * gain[c]
            m1 += g
            m2 += g * xhat[i, c]
        m1 /= d
        m2 /= d
        for c in range(d):
            g = dy[i, c] * gain[c]
            dx[i, c] = rstd[i] * (g - m1 - xhat[i, c] * m2)
            dgain[c] += dy[i, c] * xhat[i, c]
            dbias[c] += dy[i, c]
    return dx_arr, dgain_arr, dbias_arr
