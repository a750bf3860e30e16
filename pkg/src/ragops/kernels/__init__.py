"""Hot numeric kernels with a compiled fast path.

The Cython extension ``ragops.kernels._native`` is selected at import when
it is importable; otherwise (or when ``RAGOPS_PURE_PYTHON`` is set) the
pure-Python/numpy implementations in :mod:`ragops.kernels.pure` are used.
Both backends hash identically, so embeddings do not depend on which one
is active. ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import pure as _pure

if os.environ.get("RAGOPS_PURE_PYTHON"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

fnv1a64 = _impl.fnv1a64
hashed_counts = _impl.hashed_counts
dot_scores = _impl.dot_scores
bm25_accumulate = _impl.bm25_accumulate


def embed_tokens(tokens: list[str], dim: int) -> np.ndarray:
    """L2-normalized signed hashed bag-of-words vector for ``tokens``.

    Pre-normalization counts are integer-valued, so the result is
    bit-identical across backends. If sign cancellation zeroes the whole
    vector (possible only for degenerate token sets), fall back to
    unsigned counts so the unit-norm invariant still holds.
    """
    if not tokens:
        raise ValueError("embed_tokens requires at least one token")
    counts = hashed_counts(tokens, dim)
    norm = math.sqrt(float(np.dot(counts, counts)))
    if norm == 0.0:
        for tok in tokens:
            counts[fnv1a64(tok.encode("utf-8")) % dim] += 1.0
        norm = math.sqrt(float(np.dot(counts, counts)))
    return counts / norm


def backend_module(name: str):
    """Return a kernel backend by name ("pure" or "native")."""
    if name == "pure":
        return _pure
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown kernel backend: {name}")
