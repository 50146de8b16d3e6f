"""Pure-NumPy fallback for the pairwise gate-kernel sums.

Distances between binary rows are integers, and integer-valued float64
arithmetic is exact, so the matmul-based distance matrix is bit-reproducible
regardless of BLAS blocking.  Kept API-identical to the compiled module.
"""

import numpy as np

_POPCOUNT_BYTE = np.array([bin(b).count("1") for b in range(256)], dtype=np.float64)


def _unpack_counts(words):
    # per-row total popcount plus the float 0/1 bit matrix
    as_bytes = words.view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little").astype(np.float64)
    return bits


def kernel_row_sums(query, ref, table):
    """out[i] = sum_j table[popcount(query[i] ^ ref[j])]."""
    if query.shape[1] != ref.shape[1]:
        raise ValueError("query and ref word widths differ")
    qb = _unpack_counts(query)
    rb = _unpack_counts(ref)
    # Hamming distance = |q| + |r| - 2 q.r, exact in float64 for D < 2^52
    qn = qb.sum(axis=1)
    rn = rb.sum(axis=1)
    dist = qn[:, None] + rn[None, :] - 2.0 * (qb @ rb.T)
    idx = dist.astype(np.intp)
    return np.asarray(table)[idx].sum(axis=1)


def hamming_matrix(query, ref):
    if query.shape[1] != ref.shape[1]:
        raise ValueError("query and ref word widths differ")
    qb = _unpack_counts(query)
    rb = _unpack_counts(ref)
    qn = qb.sum(axis=1)
    rn = rb.sum(axis=1)
    dist = qn[:, None] + rn[None, :] - 2.0 * (qb @ rb.T)
    return dist.astype(np.int64)
