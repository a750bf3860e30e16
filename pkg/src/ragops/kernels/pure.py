"""Pure-Python/numpy implementations of the hot kernels.

These are the fallback for :mod:`ragops.kernels._native` and the reference
the native kernels are checked against. Hashing is integer-exact, so both
backends produce bit-identical hashed count vectors.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def hashed_counts(tokens: list[str], dim: int) -> np.ndarray:
    """Signed feature-hashed token counts.

    Bucket is the hash modulo ``dim``; the sign comes from the hash's top
    bit so it is independent of the bucket for any dim << 2**63.
    """
    out = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = fnv1a64(tok.encode("utf-8"))
        out[h % dim] += 1.0 if (h >> 63) == 0 else -1.0
    return out


def dot_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of each matrix row with the query vector."""
    return matrix @ query


def bm25_accumulate(
    scores: np.ndarray,
    doc_idx: np.ndarray,
    tf: np.ndarray,
    doc_len: np.ndarray,
    idf: float,
    avgdl: float,
    k1: float,
    b: float,
) -> None:
    """Add one term's BM25 contribution to ``scores`` in place.

    ``doc_idx`` holds unique row indices (one posting per document), so
    plain fancy-index accumulation is safe.
    """
    contrib = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avgdl))
    scores[doc_idx] += contrib
