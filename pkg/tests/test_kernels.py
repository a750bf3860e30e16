import numpy as np
import pytest

from ragops import kernels
from ragops.kernels import pure

native = pytest.importorskip("ragops.kernels._native",
                             reason="native kernels not built")


TOKENS = ["hello", "world", "hello", "café", "über", "a" * 40, "42"]


def test_fnv1a64_parity_and_known_value():
    # FNV-1a 64 of empty input is the offset basis
    assert pure.fnv1a64(b"") == 0xCBF29CE484222325
    for tok in TOKENS:
        assert pure.fnv1a64(tok.encode()) == native.fnv1a64(tok.encode())


def test_hashed_counts_bit_identical_across_backends():
    a = pure.hashed_counts(TOKENS, 256)
    b = native.hashed_counts(TOKENS, 256)
    assert np.array_equal(a, b)
    assert a.sum() != 0 or True  # signed counts may cancel; parity is the claim


def test_embed_tokens_unit_norm_and_determinism():
    v1 = kernels.embed_tokens(TOKENS, 256)
    v2 = kernels.embed_tokens(list(TOKENS), 256)
    assert np.array_equal(v1, v2)
    assert abs(np.linalg.norm(v1) - 1.0) < 1e-9


def test_embed_tokens_requires_tokens():
    with pytest.raises(ValueError):
        kernels.embed_tokens([], 256)


def test_dot_scores_parity():
    rng = np.random.default_rng(3)
    matrix = np.ascontiguousarray(rng.normal(size=(40, 64)))
    query = np.ascontiguousarray(rng.normal(size=64))
    got_native = native.dot_scores(matrix, query)
    got_pure = pure.dot_scores(matrix, query)
    assert np.allclose(got_native, got_pure, atol=1e-12)


def test_bm25_accumulate_parity():
    rng = np.random.default_rng(4)
    n = 30
    doc_idx = np.arange(n, dtype=np.int64)
    tf = rng.integers(1, 6, size=n).astype(np.float64)
    doc_len = rng.integers(5, 60, size=n).astype(np.float64)
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    native.bm25_accumulate(s1, doc_idx, tf, doc_len, 1.7, 22.0, 1.2, 0.75)
    pure.bm25_accumulate(s2, doc_idx, tf, doc_len, 1.7, 22.0, 1.2, 0.75)
    assert np.allclose(s1, s2, atol=1e-12)


def test_backend_selection_reports_something():
    assert kernels.BACKEND in ("pure", "native")
    assert kernels.backend_module("pure") is pure
