"""Derived retrieval structures: chunking, the reference embedder, and an
exact vector + BM25 keyword index updated incrementally from lake change
feeds.

Chunk geometry
--------------
Chunks are defined over word-token positions. With target size T and
overlap O (stride S = T - O), hard chunk k covers tokens
[k*S, min(k*S + T, n)); sentence-aware chunking instead packs whole
sentences into segments of at most T tokens (hard-splitting single
sentences longer than T) and prepends the previous O tokens to each
segment. In both modes the de-overlapped regions partition the token
stream, and chunk texts are cut at token-start character offsets, so
concatenating chunks with their overlap prefix removed reconstructs the
source text byte-exactly.

The reference embedder is a signed feature-hashed bag of words
(D=256, FNV-1a bucket/sign hashing, L2-normalized): deterministic and
dependency-free, so every downstream metric is reproducible. Real
embedders plug in behind the same contract keyed by embedder_id.
"""

from __future__ import annotations

import math
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyText, StaleFeed
from .textutils import sentence_start_chars, token_spans, tokenize

EMBED_DIM = 256
EMBEDDER_ID = "hashed-bow-256"

BM25_K1 = 1.2
BM25_B = 0.75


@dataclass(frozen=True)
class ChunkPolicy:
    target_size: int = 200
    overlap: int = 40
    boundary: str = "sentence_aware"  # sentence_aware | hard

    def __post_init__(self):
        if not 0 <= self.overlap < self.target_size:
            raise ConfigError("require 0 <= overlap < target_size")
        if self.boundary not in ("sentence_aware", "hard"):
            raise ConfigError(f"unknown boundary mode: {self.boundary!r}")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_key: str
    version: int
    ordinal: int
    text: str
    token_span: tuple[int, int]
    acl: tuple[str, ...]


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    embedder_id: str = EMBEDDER_ID

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True)
class IndexEpoch:
    epoch: int
    lake_seq_covered: int
    chunk_count: int
    embedder_id: str

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lake_seq_covered": self.lake_seq_covered,
                "chunk_count": self.chunk_count, "embedder_id": self.embedder_id}


@dataclass(frozen=True)
class Hit:
    chunk_id: str
    score: float
    rank: int


def chunk_id_for(doc_key: str, version: int, ordinal: int) -> str:
    return f"{doc_key}:{version}:{ordinal}"


def parse_chunk_id(chunk_id: str) -> tuple[str, int, int]:
    doc_key, version, ordinal = chunk_id.rsplit(":", 2)
    return doc_key, int(version), int(ordinal)


def embed(text: str) -> Embedding:
    """Reference embedding: deterministic in the text alone."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText("no tokens to embed")
    return Embedding(vector=kernels.embed_tokens(tokens, EMBED_DIM))


def _segment_starts(text: str, spans: list[tuple[int, int]],
                    policy: ChunkPolicy) -> list[int]:
    """Token indices where de-overlapped segments begin (b_0 = 0).

    Hard mode: chunk k covers tokens [k*stride, k*stride + target), so
    segment k >= 1 begins at (k-1)*stride + target.
    """
    n = len(spans)
    target = policy.target_size
    if policy.boundary == "hard":
        stride = target - policy.overlap
        starts = [0]
        k = 1
        while (k - 1) * stride + target < n:
            starts.append((k - 1) * stride + target)
            k += 1
        return starts

    # sentence_aware: greedy-pack whole sentences up to target tokens;
    # a single longer-than-target sentence is hard-split.
    sent_chars = sentence_start_chars(text)
    sent_tokens = sorted({t for t in (_first_token_at(spans, pos)
                                      for pos in sent_chars) if t is not None})
    if not sent_tokens or sent_tokens[0] != 0:
        sent_tokens = [0] + [t for t in sent_tokens if t != 0]
    bounds = sent_tokens + [n]
    starts = [0]
    seg_start = 0
    for s, e in zip(bounds, bounds[1:]):
        if e == s:
            continue
        if e - s > target:
            if s > seg_start:
                starts.append(s)
            pos = s + target
            while pos < e:
                starts.append(pos)
                pos += target
            seg_start = starts[-1]
        elif e - seg_start > target:
            starts.append(s)
            seg_start = s
    return sorted(set(starts))


def _first_token_at(spans: list[tuple[int, int]], pos: int) -> int | None:
    lo, hi = 0, len(spans)
    while lo < hi:
        mid = (lo + hi) // 2
        if spans[mid][0] < pos:
            lo = mid + 1
        else:
            hi = mid
    return lo if lo < len(spans) else None


def chunk(doc, policy: ChunkPolicy) -> list[Chunk]:
    """Split a document version into retrieval chunks.

    ``doc`` needs doc_key, version, text and acl attributes. Returns []
    for token-free text.
    """
    text = doc.text
    spans = token_spans(text)
    n = len(spans)
    if n == 0:
        return []
    starts = _segment_starts(text, spans, policy)
    bounds = starts + [n]
    chunks: list[Chunk] = []
    for ordinal in range(len(starts)):
        seg_start, seg_end = bounds[ordinal], bounds[ordinal + 1]
        tok_start = max(seg_start - policy.overlap, 0) if ordinal else 0
        char_start = spans[tok_start][0] if ordinal else 0
        char_end = spans[seg_end][0] if seg_end < n else len(text)
        chunks.append(Chunk(
            chunk_id=chunk_id_for(doc.doc_key, doc.version, ordinal),
            doc_key=doc.doc_key,
            version=doc.version,
            ordinal=ordinal,
            text=text[char_start:char_end],
            token_span=(tok_start, seg_end),
            acl=tuple(doc.acl),
        ))
    return chunks


def reconstruct(chunks: list[Chunk]) -> str:
    """Concatenate chunks with their overlap prefix removed (byte-exact).

    Chunk k's de-overlapped segment begins where chunk k-1's token span
    ends, so the prefix to drop is prev_span_end - own_span_start tokens.
    """
    ordered = sorted(chunks, key=lambda c: c.ordinal)
    pieces = []
    for prev, chunk_ in zip([None] + ordered, ordered):
        if prev is None:
            pieces.append(chunk_.text)
            continue
        drop = prev.token_span[1] - chunk_.token_span[0]
        if drop <= 0:
            pieces.append(chunk_.text)
            continue
        local = token_spans(chunk_.text)
        pieces.append(chunk_.text[local[drop][0]:])
    return "".join(pieces)


class SearchIndex:
    """Exact top-k vector search plus BM25 keyword search over chunks.

    Epoch-based: apply()/rebuild() advance the epoch atomically under a
    writer lock; searches read a consistent state. Exact brute-force
    scoring keeps Table-style metrics reproducible; ANN structures could
    sit behind the same contract.
    """

    def __init__(self, policy: ChunkPolicy | None = None,
                 embedder_id: str = EMBEDDER_ID):
        self._lock = threading.RLock()
        self.policy = policy or ChunkPolicy()
        self.embedder_id = embedder_id
        self._chunks: dict[str, Chunk] = {}
        self._vectors: dict[str, np.ndarray] = {}
        self._doc_chunks: dict[str, list[str]] = {}
        self._chunk_seq: dict[str, int] = {}
        self._postings: dict[str, dict[str, int]] = {}
        self._chunk_len: dict[str, int] = {}
        self._flags: dict[str, tuple[str, ...]] = {}
        self._epoch = IndexEpoch(0, 0, 0, embedder_id)
        self._epochs: list[IndexEpoch] = [self._epoch]
        self._centroids: dict[int, np.ndarray | None] = {0: None}
        self.drift_history: list[tuple[int, float]] = []
        self._matrix_cache: tuple[list[str], np.ndarray] | None = None

    # ------------------------------------------------------------------
    @property
    def epoch(self) -> IndexEpoch:
        return self._epoch

    @property
    def epochs(self) -> list[IndexEpoch]:
        return list(self._epochs)

    def chunks(self):
        return list(self._chunks.values())

    def get_chunk(self, chunk_id: str) -> Chunk | None:
        return self._chunks.get(chunk_id)

    def document_frequency(self, term: str) -> int:
        return len(self._postings.get(term, ()))

    def centroid(self, epoch: int | None = None) -> np.ndarray | None:
        return self._centroids[self._epoch.epoch if epoch is None else epoch]

    # ------------------------------------------------------------------
    # mutation

    def _remove_doc(self, doc_key: str) -> None:
        for cid in self._doc_chunks.pop(doc_key, []):
            chunk_ = self._chunks.pop(cid)
            self._vectors.pop(cid, None)
            self._chunk_seq.pop(cid, None)
            self._chunk_len.pop(cid, None)
            self._flags.pop(cid, None)
            for term in set(tokenize(chunk_.text)):
                postings = self._postings.get(term)
                if postings is not None:
                    postings.pop(cid, None)
                    if not postings:
                        del self._postings[term]

    def _add_version(self, dv) -> None:
        if not dv.text:
            return
        flags = tuple(dv.metadata.get("extra", {}).get("flags", ()))
        for chunk_ in chunk(dv, self.policy):
            tokens = tokenize(chunk_.text)
            self._chunks[chunk_.chunk_id] = chunk_
            self._vectors[chunk_.chunk_id] = kernels.embed_tokens(tokens, EMBED_DIM)
            self._chunk_seq[chunk_.chunk_id] = dv.lake_seq
            self._chunk_len[chunk_.chunk_id] = len(tokens)
            self._flags[chunk_.chunk_id] = flags
            self._doc_chunks.setdefault(dv.doc_key, []).append(chunk_.chunk_id)
            for term, tf in Counter(tokens).items():
                self._postings.setdefault(term, {})[chunk_.chunk_id] = tf

    def _finish_epoch(self, lake_seq: int) -> IndexEpoch:
        prev_centroid = self._centroids[self._epoch.epoch]
        self._epoch = IndexEpoch(self._epoch.epoch + 1, lake_seq,
                                 len(self._chunks), self.embedder_id)
        self._epochs.append(self._epoch)
        if self._vectors:
            centroid = np.mean(np.stack(list(self._vectors.values())), axis=0)
        else:
            centroid = None
        self._centroids[self._epoch.epoch] = centroid
        drift = 0.0
        if prev_centroid is not None and centroid is not None:
            denom = float(np.linalg.norm(prev_centroid) * np.linalg.norm(centroid))
            if denom > 0:
                drift = 1.0 - float(np.dot(prev_centroid, centroid)) / denom
        self.drift_history.append((self._epoch.epoch, drift))
        self._matrix_cache = None
        return self._epoch

    def apply(self, changes, lake) -> IndexEpoch:
        """Incremental update; equivalent to rebuild() at changes.to_seq."""
        with self._lock:
            if changes.from_seq != self._epoch.lake_seq_covered:
                raise StaleFeed(
                    f"feed starts at {changes.from_seq}, index covers "
                    f"{self._epoch.lake_seq_covered}")
            for entry in changes.entries:
                self._remove_doc(entry.doc_key)
                if entry.change == "upsert":
                    dv = lake.record(entry.doc_key, version=entry.version)
                    self._add_version(dv)
            return self._finish_epoch(changes.to_seq)

    def rebuild(self, lake) -> IndexEpoch:
        """Full re-derivation from live lake versions (apply()'s oracle)."""
        with self._lock:
            self._chunks.clear()
            self._vectors.clear()
            self._doc_chunks.clear()
            self._chunk_seq.clear()
            self._postings.clear()
            self._chunk_len.clear()
            self._flags.clear()
            for dv in lake.live_versions():
                self._add_version(dv)
            return self._finish_epoch(lake.lake_seq)

    # ------------------------------------------------------------------
    # search

    def _visible(self, role: str | None) -> list[str]:
        return [cid for cid, chunk_ in self._chunks.items()
                if not chunk_.acl or role in chunk_.acl]

    def _ranked(self, scored: list[tuple[str, float]], k: int) -> list[Hit]:
        scored.sort(key=lambda item: (-item[1], -self._chunk_seq[item[0]], item[0]))
        return [Hit(cid, float(score), rank)
                for rank, (cid, score) in enumerate(scored[:k], start=1)]

    def search_vector(self, query: Embedding | np.ndarray, k: int,
                      role: str | None = None) -> list[Hit]:
        """Exact top-k by cosine over ACL-visible chunks.

        Ties break by (higher lake recency, then chunk_id).
        """
        if k < 1:
            raise ConfigError("k must be >= 1")
        if isinstance(query, Embedding):
            if query.embedder_id != self.embedder_id:
                raise ConfigError(
                    f"query embedder {query.embedder_id!r} does not match "
                    f"index embedder {self.embedder_id!r}")
            qvec = query.vector
        else:
            qvec = np.asarray(query, dtype=np.float64)
        with self._lock:
            if not self._chunks:
                return []
            if self._matrix_cache is None:
                ids = sorted(self._vectors)
                matrix = np.ascontiguousarray(
                    np.stack([self._vectors[cid] for cid in ids]))
                self._matrix_cache = (ids, matrix)
            ids, matrix = self._matrix_cache
            scores = kernels.dot_scores(matrix, np.ascontiguousarray(qvec))
            visible = set(self._visible(role))
            scored = [(cid, float(s)) for cid, s in zip(ids, scores)
                      if cid in visible]
            return self._ranked(scored, k)

    def search_keyword(self, terms: list[str], k: int,
                       role: str | None = None) -> list[Hit]:
        """BM25 (k1=1.2, b=0.75) over ACL-visible chunks.

        idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1), so scores stay
        positive. Returns [] when every term is out of vocabulary.
        """
        if k < 1:
            raise ConfigError("k must be >= 1")
        with self._lock:
            visible = self._visible(role)
            if not visible:
                return []
            pos = {cid: i for i, cid in enumerate(visible)}
            doc_len = np.array([self._chunk_len[cid] for cid in visible],
                               dtype=np.float64)
            n_docs = len(visible)
            avgdl = float(doc_len.mean())
            scores = np.zeros(n_docs, dtype=np.float64)
            matched = False
            for term in terms:
                postings = {cid: tf for cid, tf in
                            self._postings.get(term, {}).items() if cid in pos}
                if not postings:
                    continue
                matched = True
                df = len(postings)
                idf = math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
                idx = np.array([pos[cid] for cid in postings], dtype=np.int64)
                tf = np.array(list(postings.values()), dtype=np.float64)
                kernels.bm25_accumulate(scores, idx, tf, doc_len[idx], idf,
                                        avgdl, BM25_K1, BM25_B)
            if not matched:
                return []
            scored = [(cid, float(scores[pos[cid]])) for cid in visible
                      if scores[pos[cid]] > 0.0]
            return self._ranked(scored, k)

    # ------------------------------------------------------------------
    def flags_of(self, chunk_id: str) -> tuple[str, ...]:
        return self._flags.get(chunk_id, ())

    def stats(self) -> dict:
        d = self._epoch.to_dict()
        drift = self.drift_history[-1][1] if self.drift_history else 0.0
        d["embedding_drift"] = drift
        return d
