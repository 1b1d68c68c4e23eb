# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gram-matrix builder for the convolution-process kernels.

Entries follow the closed form for squared-exponential smoothing kernels:
the shared-process term couples every pair of states, and the
state-specific term switches on only when both points carry the same
state label.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double ROOT_2PI = sqrt(2.0 * np.pi)


def gram(const double[::1] t_row, const long[::1] s_row,
         const double[::1] t_col, const long[::1] s_col,
         const double[::1] v0, const double[::1] a0,
         const double[::1] v1, const double[::1] a1):
    """Cross-covariance between (time, state) index lists; states 0-based."""
    cdef Py_ssize_t nr = t_row.shape[0], nc = t_col.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((nr, nc))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef long m, h
    cdef double dt, asum, val
    for i in range(nr):
        m = s_row[i]
        for j in range(nc):
            h = s_col[j]
            dt = t_row[i] - t_col[j]
            asum = a0[m] + a0[h]
            val = ROOT_2PI * v0[m] * v0[h] / sqrt(asum) \
                * exp(-0.5 * dt * dt * a0[m] * a0[h] / asum)
            if m == h:
                val += ROOT_2PI * v1[m] * v1[m] / sqrt(2.0 * a1[m]) \
                    * exp(-0.25 * dt * dt * a1[m])
            o[i, j] = val
    return out
