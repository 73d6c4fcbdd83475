# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled filter kernel; semantics match sase._kernels_py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def filter_interval(object y_in, object H_in, object L_in, object x0_in):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] H = np.ascontiguousarray(H_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] L = np.ascontiguousarray(L_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x0 = np.ascontiguousarray(x0_in, dtype=np.float64)

    cdef Py_ssize_t M = y.shape[0]
    cdef Py_ssize_t p = y.shape[1]
    cdef Py_ssize_t nx = x0.shape[0]

    cdef cnp.ndarray[cnp.float64_t, ndim=2] X = np.empty((M + 1, nx), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] innov = np.empty(p, dtype=np.float64)

    cdef Py_ssize_t t, i, j
    cdef double acc

    for j in range(nx):
        X[0, j] = x0[j]

    for t in range(M):
        for i in range(p):
            acc = y[t, i]
            for j in range(nx):
                acc -= H[t, i, j] * X[t, j]
            innov[i] = acc
        for j in range(nx):
            acc = X[t, j]
            for i in range(p):
                acc += L[t, j, i] * innov[i]
            X[t + 1, j] = acc
    return X
