# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-softmax kernels. See :mod:`tmtstream.kernels` for the fallback."""

import numpy as np
from libc.math cimport exp


def softmax_forward(double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                out[i, j] = exp(x[i, j] - m)
                s += out[i, j]
            s = 1.0 / s
            for j in range(cols):
                out[i, j] *= s
    return out_arr


def softmax_backward(double[:, ::1] p, double[:, ::1] g):
    cdef Py_ssize_t rows = p.shape[0], cols = p.shape[1], i, j
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += g[i, j] * p[i, j]
            for j in range(cols):
                out[i, j] = p[i, j] * (g[i, j] - dot)
    return out_arr
