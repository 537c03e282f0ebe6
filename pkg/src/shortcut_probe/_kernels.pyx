# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels; same layouts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.zeros((n * h * w, c * 9), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, i, j, ch, di, dj, r, si, sj, base
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    r = (b * h + i) * w + j
                    for ch in range(c):
                        base = ch * 9
                        for di in range(3):
                            si = i + di - 1
                            if si < 0 or si >= h:
                                continue
                            for dj in range(3):
                                sj = j + dj - 1
                                if sj < 0 or sj >= w:
                                    continue
                                cols[r, base + di * 3 + dj] = x[b, ch, si, sj]
    return out


def col2im3x3(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t b, i, j, ch, di, dj, r, si, sj, base
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    r = (b * h + i) * w + j
                    for ch in range(c):
                        base = ch * 9
                        for di in range(3):
                            si = i + di - 1
                            if si < 0 or si >= h:
                                continue
                            for dj in range(3):
                                sj = j + dj - 1
                                if sj < 0 or sj >= w:
                                    continue
                                x[b, ch, si, sj] += cols[r, base + di * 3 + dj]
    return out


def avgpool2x2(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    out = np.empty((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        y[b, ch, i, j] = 0.25 * (x[b, ch, 2 * i, 2 * j] + x[b, ch, 2 * i, 2 * j + 1]
                                                 + x[b, ch, 2 * i + 1, 2 * j] + x[b, ch, 2 * i + 1, 2 * j + 1])
    return out


def avgpool2x2_backward(const double[:, :, :, ::1] g, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    out = np.empty((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j
    cdef double q
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        q = 0.25 * g[b, ch, i, j]
                        y[b, ch, 2 * i, 2 * j] = q
                        y[b, ch, 2 * i, 2 * j + 1] = q
                        y[b, ch, 2 * i + 1, 2 * j] = q
                        y[b, ch, 2 * i + 1, 2 * j + 1] = q
    return out
