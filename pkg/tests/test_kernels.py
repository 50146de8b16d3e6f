import numpy as np

from tcx.kernels import BACKEND, _pairwise_py, hamming_matrix, kernel_row_sums
from tcx.gating import GateMatrix


def _random_words(rng, n, d):
    bits = rng.random((n, d)) < 0.5
    return GateMatrix.from_dense(0, bits, "relu").packed_words(), bits


def test_backend_selected():
    assert BACKEND in ("cython", "numpy")


def test_hamming_matches_bruteforce(rng):
    words, bits = _random_words(rng, 37, 130)    # non-multiple of 64
    dist = hamming_matrix(words, words)
    brute = (bits[:, None, :] != bits[None, :, :]).sum(axis=2)
    assert np.array_equal(dist, brute)


def test_kernel_sums_match_bruteforce(rng):
    words, bits = _random_words(rng, 25, 70)
    table = np.exp(-np.arange(71) / 3.0)
    sums = kernel_row_sums(words, words, table)
    brute_d = (bits[:, None, :] != bits[None, :, :]).sum(axis=2)
    brute = table[brute_d].sum(axis=1)
    assert np.allclose(sums, brute, rtol=1e-12)


def test_backends_agree(rng):
    words, _ = _random_words(rng, 40, 200)
    table = np.exp(-np.arange(201) / 11.0)
    a = kernel_row_sums(words, words, table)
    b = _pairwise_py.kernel_row_sums(words, words, table)
    assert np.allclose(a, b, rtol=1e-12)
    assert np.array_equal(hamming_matrix(words, words),
                          _pairwise_py.hamming_matrix(words, words))


def test_asymmetric_query_ref(rng):
    qw, qb = _random_words(rng, 10, 65)
    rw, rb = _random_words(np.random.default_rng(5), 17, 65)
    table = np.exp(-np.arange(66) * 0.2)
    sums = kernel_row_sums(qw, rw, table)
    brute_d = (qb[:, None, :] != rb[None, :, :]).sum(axis=2)
    assert np.allclose(sums, table[brute_d].sum(axis=1), rtol=1e-12)
