# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise-kernel sums over bit-packed gate rows.

Rows are packed into little-endian uint64 words, so the squared distance
between two binary rows is the popcount of their XOR.  Accumulation order is
fixed (k ascending per query row) to keep results reproducible.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport uint64_t

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def kernel_row_sums(const uint64_t[:, ::1] query,
                    const uint64_t[:, ::1] ref,
                    const double[::1] table):
    """out[i] = sum_j table[popcount(query[i] ^ ref[j])]."""
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t nr = ref.shape[0]
    cdef Py_ssize_t nw = query.shape[1]
    if ref.shape[1] != nw:
        raise ValueError("query and ref word widths differ")
    out_arr = np.empty(nq, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, w
    cdef int d
    cdef double acc
    with nogil:
        for i in range(nq):
            acc = 0.0
            for j in range(nr):
                d = 0
                for w in range(nw):
                    d += __builtin_popcountll(query[i, w] ^ ref[j, w])
                acc += table[d]
            out[i] = acc
    return out_arr


def hamming_matrix(const uint64_t[:, ::1] query, const uint64_t[:, ::1] ref):
    """Full integer distance matrix; used by tests and the benchmark."""
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t nr = ref.shape[0]
    cdef Py_ssize_t nw = query.shape[1]
    if ref.shape[1] != nw:
        raise ValueError("query and ref word widths differ")
    out_arr = np.empty((nq, nr), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, w
    cdef int d
    with nogil:
        for i in range(nq):
            for j in range(nr):
                d = 0
                for w in range(nw):
                    d += __builtin_popcountll(query[i, w] ^ ref[j, w])
                out[i, j] = d
    return out_arr
