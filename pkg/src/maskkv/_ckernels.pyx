# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled scoring / selection kernels (see ``_kernels_py`` for the reference)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libcpp.vector cimport vector
from libcpp.pair cimport pair
from libcpp.algorithm cimport partial_sort, sort

cnp.import_array()


def column_vote(const double[:, :] attn, Py_ssize_t row_start, Py_ssize_t row_stop,
                Py_ssize_t n_cols):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n_cols, dtype=np.float64)
    cdef double[:] o = out
    cdef Py_ssize_t i, j
    for i in range(row_start, row_stop):
        for j in range(n_cols):
            o[j] += attn[i, j]
    return out


def mass_over(const double[:, :] attn, cols):
    cdef const long long[:] c = np.ascontiguousarray(cols, dtype=np.int64)
    cdef Py_ssize_t i, j, nc = c.shape[0]
    cdef double total = 0.0
    for i in range(attn.shape[0]):
        for j in range(nc):
            total += attn[i, c[j]]
    return total


def topk_indices(const double[:] scores, Py_ssize_t k):
    cdef Py_ssize_t n = scores.shape[0], i
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    cdef vector[pair[double, Py_ssize_t]] items
    items.reserve(n)
    for i in range(n):
        items.push_back(pair[double, Py_ssize_t](-scores[i], i))
    partial_sort(items.begin(), items.begin() + k, items.end())
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(k, dtype=np.int64)
    cdef vector[Py_ssize_t] picked
    picked.reserve(k)
    for i in range(k):
        picked.push_back(items[i].second)
    sort(picked.begin(), picked.end())
    for i in range(k):
        out[i] = picked[i]
    return out


def row_cosine(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double saa, sbb, sab, na, nb
    cdef int n_zero = 0
    for i in range(n):
        saa = 0.0
        sbb = 0.0
        sab = 0.0
        for j in range(d):
            saa += a[i, j] * a[i, j]
            sbb += b[i, j] * b[i, j]
            sab += a[i, j] * b[i, j]
        na = sqrt(saa)
        nb = sqrt(sbb)
        if na == 0.0 or nb == 0.0:
            out[i] = 1.0
            n_zero += 1
        else:
            out[i] = min(1.0, max(-1.0, sab / (na * nb)))
    return out, n_zero
