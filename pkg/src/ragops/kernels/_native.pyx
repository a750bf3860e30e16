# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Native implementations of the hot kernels (token hashing, dot-product
scans, BM25 accumulation). Must match ragops.kernels.pure bit-for-bit on
integer hashing and to float64 rounding on score math."""

import numpy as np

from cpython.unicode cimport PyUnicode_AsUTF8AndSize


cdef inline unsigned long long _fnv1a64(const char* data, Py_ssize_t n) nogil:
    cdef unsigned long long h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    for i in range(n):
        h = (h ^ <unsigned char>data[i]) * 0x100000001B3ULL
    return h


def fnv1a64(bytes data):
    """64-bit FNV-1a hash of a byte string."""
    return _fnv1a64(data, len(data))


def hashed_counts(list tokens, int dim):
    """Signed feature-hashed token counts; see ragops.kernels.pure."""
    out = np.zeros(dim, dtype=np.float64)
    cdef double[::1] view = out
    cdef unsigned long long h
    cdef const char* s
    cdef Py_ssize_t length
    for tok in tokens:
        s = PyUnicode_AsUTF8AndSize(tok, &length)
        h = _fnv1a64(s, length)
        if (h >> 63) == 0:
            view[h % <unsigned long long>dim] += 1.0
        else:
            view[h % <unsigned long long>dim] -= 1.0
    return out


def dot_scores(double[:, ::1] matrix, double[::1] query):
    """Dot product of each matrix row with the query vector."""
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] view = out
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += matrix[i, j] * query[j]
            view[i] = acc
    return out


def bm25_accumulate(
    double[::1] scores,
    long long[::1] doc_idx,
    double[::1] tf,
    double[::1] doc_len,
    double idf,
    double avgdl,
    double k1,
    double b,
):
    """Add one term's BM25 contribution to ``scores`` in place."""
    cdef Py_ssize_t n = doc_idx.shape[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            scores[doc_idx[i]] += idf * tf[i] * (k1 + 1.0) / (
                tf[i] + k1 * (1.0 - b + b * doc_len[i] / avgdl)
            )
