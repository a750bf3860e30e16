import math
import random
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import AcceptReport, doc_words, make_doc
from oracles import brute_cosine_topk, reference_bm25
from ragops.datalake import DataLake
from ragops.errors import ConfigError, EmptyText, StaleFeed
from ragops.retrieval import (ChunkPolicy, SearchIndex, chunk, embed,
                              parse_chunk_id, reconstruct)
from ragops.textutils import tokenize


def tdoc(text, key="k", version=1, acl=()):
    return SimpleNamespace(doc_key=key, version=version, text=text, acl=acl)


# ---------------------------------------------------------------- chunking


def test_small_doc_single_chunk():
    text = " ".join(f"t{i}" for i in range(50))
    chunks = chunk(tdoc(text), ChunkPolicy(200, 40, "hard"))
    assert len(chunks) == 1
    assert chunks[0].text == text
    assert chunks[0].token_span == (0, 50)


def test_hard_chunk_stride_arithmetic():
    text = " ".join(f"t{i}" for i in range(400))
    chunks = chunk(tdoc(text), ChunkPolicy(200, 40, "hard"))
    assert [c.token_span for c in chunks] == [(0, 200), (160, 360), (320, 400)]
    assert [c.ordinal for c in chunks] == [0, 1, 2]


def test_sentence_aware_splits_at_boundary():
    s1 = " ".join(f"a{i}" for i in range(149)) + " one."
    s2 = " ".join(f"b{i}" for i in range(149)) + " two."
    chunks = chunk(tdoc(s1 + " " + s2), ChunkPolicy(200, 40, "sentence_aware"))
    assert len(chunks) == 2
    assert chunks[0].token_span == (0, 150)
    assert chunks[1].token_span == (110, 300)
    # de-overlap cut lands exactly at the second sentence
    assert reconstruct(chunks) == s1 + " " + s2


def test_oversized_sentence_hard_splits():
    text = " ".join(f"t{i}" for i in range(500)) + "."
    chunks = chunk(tdoc(text), ChunkPolicy(200, 0, "sentence_aware"))
    assert all(c.token_span[1] - c.token_span[0] <= 200 for c in chunks)
    assert reconstruct(chunks) == text


def test_chunk_ids_encode_provenance():
    chunks = chunk(tdoc("one two three.", key="src/a:b", version=7),
                   ChunkPolicy(2, 1, "hard"))
    for c in chunks:
        assert parse_chunk_id(c.chunk_id) == ("src/a:b", 7, c.ordinal)


def test_reconstruction_fuzz_byte_exact():
    rng = random.Random(99)
    vocab = ["alpha", "beta", "Gamma", "délta", "x" * 25, "q7"]
    seps = [" ", "  ", ".\n", "! ", "? ", ", ", "\n\n", " -- "]
    for _ in range(1000):
        n = rng.randint(1, 300)
        parts = []
        for _ in range(n):
            parts.append(rng.choice(vocab))
            parts.append(rng.choice(seps))
        text = "".join(parts).strip()
        if not tokenize(text):
            continue
        policy = ChunkPolicy(rng.randint(4, 60),
                             rng.randint(0, 3),
                             rng.choice(["hard", "sentence_aware"]))
        chunks = chunk(tdoc(text), policy)
        assert reconstruct(chunks) == text
        ordinals = [c.ordinal for c in chunks]
        assert ordinals == list(range(len(chunks)))
        for c in chunks:
            assert (c.token_span[1] - c.token_span[0]
                    <= policy.target_size + policy.overlap)


# ---------------------------------------------------------------- embedding


def test_embed_deterministic_and_unit_norm():
    e1 = embed("The same text twice.")
    e2 = embed("The same text twice.")
    assert np.array_equal(e1.vector, e2.vector)
    assert abs(e1.norm - 1.0) <= 1e-9
    assert float(np.dot(e1.vector, e2.vector)) == pytest.approx(1.0, abs=1e-9)


def test_embed_empty_raises():
    with pytest.raises(EmptyText):
        embed("...!!!")


def test_disjoint_vocabulary_near_zero_cosine():
    a = embed("alpha bravo charlie delta echo foxtrot golf hotel india")
    b = embed("zulu yankee xray whiskey victor uniform tango sierra romeo")
    assert abs(float(np.dot(a.vector, b.vector))) <= 0.2


# ---------------------------------------------------------------- index


def build_lake(docs):
    lake = DataLake()
    for key, text in docs:
        lake.upsert(make_doc(key, text), AcceptReport())
    return lake


def test_index_apply_empty_changeset_advances_epoch():
    lake = build_lake([("a", "some words here.")])
    index = SearchIndex(ChunkPolicy(16, 2))
    e1 = index.apply(lake.changes_since(0), lake)
    e2 = index.apply(lake.changes_since(lake.lake_seq), lake)
    assert e2.epoch == e1.epoch + 1
    assert e2.chunk_count == e1.chunk_count


def test_index_delete_removes_chunks():
    text = " ".join(f"w{i}" for i in range(40)) + "."
    lake = build_lake([("a", text), ("b", "tiny doc.")])
    index = SearchIndex(ChunkPolicy(16, 2))
    index.apply(lake.changes_since(0), lake)
    a_chunks = sum(1 for c in index.chunks() if c.doc_key == "a")
    assert a_chunks >= 2
    before = index.epoch.chunk_count
    lake.delete("a")
    index.apply(lake.changes_since(index.epoch.lake_seq_covered), lake)
    assert index.epoch.chunk_count == before - a_chunks


def test_index_apply_requires_contiguous_feed():
    lake = build_lake([("a", "words."), ("b", "more words.")])
    index = SearchIndex(ChunkPolicy(16, 2))
    with pytest.raises(StaleFeed):
        index.apply(lake.changes_since(1), lake)


def test_search_vector_exact_match_rank_one():
    lake = build_lake([("a", "unique marker sentence."), ("b", "other words here.")])
    index = SearchIndex(ChunkPolicy(16, 2))
    index.apply(lake.changes_since(0), lake)
    hits = index.search_vector(embed("unique marker sentence."), k=2)
    assert hits[0].chunk_id.startswith("a:")
    assert hits[0].score == pytest.approx(1.0, abs=1e-9)
    assert hits[0].rank == 1
    # k larger than the corpus returns everything
    assert len(index.search_vector(embed("unique marker"), k=50)) == 2


def test_search_vector_embedder_mismatch():
    index = SearchIndex()
    from ragops.retrieval import Embedding

    with pytest.raises(ConfigError):
        index.search_vector(Embedding(np.zeros(256), "other-embedder"), k=1)


def test_search_empty_index():
    index = SearchIndex()
    assert index.search_vector(embed("anything"), k=3) == []
    assert index.search_keyword(["anything"], k=3) == []


def test_vector_search_matches_brute_force_oracle():
    rng = random.Random(42)
    for trial in range(100):
        n_docs = rng.randint(1, 8)
        lake = build_lake([
            (f"d{i}", doc_words(rng, i + trial * 16, rng.randint(6, 40)))
            for i in range(n_docs)])
        index = SearchIndex(ChunkPolicy(16, 4))
        index.apply(lake.changes_since(0), lake)
        chunks = index.chunks()
        assert len(chunks) <= 50
        vectors = {c.chunk_id: index._vectors[c.chunk_id] for c in chunks}
        recency = {c.chunk_id: index._chunk_seq[c.chunk_id] for c in chunks}
        query = embed(doc_words(rng, rng.randrange(n_docs) + trial * 16, 8))
        k = rng.randint(1, 12)
        got = index.search_vector(query, k)
        want = brute_cosine_topk(vectors, query.vector, k, recency)
        assert [h.chunk_id for h in got] == [cid for cid, _ in want]
        for hit, (_, score) in zip(got, want):
            assert hit.score == pytest.approx(score, abs=1e-9)


def test_keyword_search_unique_term_and_oov():
    lake = build_lake([("a", "the quetzal flies at dawn."),
                       ("b", "ordinary words without the marker.")])
    index = SearchIndex(ChunkPolicy(16, 2))
    index.apply(lake.changes_since(0), lake)
    hits = index.search_keyword(["quetzal"], k=5)
    assert len(hits) == 1 and hits[0].chunk_id.startswith("a:")
    assert index.search_keyword(["zzzznotthere"], k=5) == []


def test_bm25_hand_computed_two_doc_fixture():
    lake = build_lake([("d0", "apple banana apple"), ("d1", "banana cherry")])
    index = SearchIndex(ChunkPolicy(16, 2))
    index.apply(lake.changes_since(0), lake)
    # idf(apple) = ln((2 - 1 + 0.5)/(1 + 0.5) + 1) = ln 2
    # d0: tf=2, dl=3, avgdl=2.5 -> denom = 2 + 1.2*(0.25 + 0.75*3/2.5)
    idf = math.log(2.0)
    denom = 2 + 1.2 * (1 - 0.75 + 0.75 * 3 / 2.5)
    expected = idf * (2 * 2.2) / denom
    hits = index.search_keyword(["apple"], k=2)
    assert len(hits) == 1
    assert hits[0].score == pytest.approx(expected, abs=1e-9)
    both = index.search_keyword(["banana"], k=2)
    assert len(both) == 2
    # shorter doc scores higher for the shared term
    assert both[0].chunk_id.startswith("d1:")


def test_bm25_matches_reference_implementation():
    rng = random.Random(7)
    vocab = [f"t{i}" for i in range(30)]
    docs = []
    for i in range(8):
        words = [rng.choice(vocab) for _ in range(rng.randint(4, 30))]
        docs.append((f"d{i}", " ".join(words) + "."))
    lake = build_lake(docs)
    index = SearchIndex(ChunkPolicy(64, 0))
    index.apply(lake.changes_since(0), lake)
    doc_tokens = {c.chunk_id: tokenize(c.text) for c in index.chunks()}
    for _ in range(20):
        terms = [rng.choice(vocab) for _ in range(rng.randint(1, 4))]
        want = reference_bm25(doc_tokens, terms)
        got = index.search_keyword(terms, k=10)
        for hit in got:
            assert hit.score == pytest.approx(want[hit.chunk_id], abs=1e-9)


def test_acl_filtering_is_sound():
    rng = random.Random(13)
    lake = DataLake()
    roles = ["legal", "sales", "eng"]
    for i in range(20):
        acl = tuple(rng.sample(roles, rng.randint(0, 2)))
        lake.upsert(make_doc(f"d{i}", doc_words(rng, i, 10), acl=acl),
                    AcceptReport())
    index = SearchIndex(ChunkPolicy(32, 4))
    index.apply(lake.changes_since(0), lake)
    for role in roles + [None, "intern"]:
        for hit in index.search_vector(embed(doc_words(rng, 3, 6)), k=20,
                                       role=role):
            c = index.get_chunk(hit.chunk_id)
            assert not c.acl or role in c.acl
        for hit in index.search_keyword(["w003x001"], k=20, role=role):
            c = index.get_chunk(hit.chunk_id)
            assert not c.acl or role in c.acl


def test_rebuild_idempotent_and_matches_incremental():
    rng = random.Random(31)
    lake = DataLake()
    index = SearchIndex(ChunkPolicy(12, 3))
    index.apply(lake.changes_since(0), lake)
    live_keys = set()
    for step in range(30):
        action = rng.random()
        key = f"d{rng.randint(0, 6)}"
        if action < 0.6 or key not in live_keys:
            decision = "accept_as_new_version" if key in live_keys else "accept"
            lake.upsert(make_doc(key, doc_words(rng, step, rng.randint(5, 40))),
                        AcceptReport(decision))
            live_keys.add(key)
        else:
            lake.delete(key)
            live_keys.discard(key)
        index.apply(lake.changes_since(index.epoch.lake_seq_covered), lake)
    fresh = SearchIndex(ChunkPolicy(12, 3))
    fresh.rebuild(lake)
    assert {c.chunk_id for c in index.chunks()} == {c.chunk_id for c in fresh.chunks()}
    for probe in range(20):
        q = embed(doc_words(rng, rng.randint(0, 29), 6))
        a = index.search_vector(q, k=10)
        b = fresh.search_vector(q, k=10)
        assert [h.chunk_id for h in a] == [h.chunk_id for h in b]
        for ha, hb in zip(a, b):
            assert ha.score == pytest.approx(hb.score, abs=1e-9)
    again = SearchIndex(ChunkPolicy(12, 3))
    again.rebuild(lake)
    assert {c.chunk_id for c in fresh.chunks()} == {c.chunk_id for c in again.chunks()}
    for cid in {c.chunk_id for c in fresh.chunks()}:
        assert np.array_equal(fresh._vectors[cid], again._vectors[cid])


def test_index_lake_consistency_invariant():
    rng = random.Random(8)
    lake = DataLake()
    index = SearchIndex(ChunkPolicy(12, 3))
    for step in range(20):
        lake.upsert(make_doc(f"d{rng.randint(0, 4)}",
                             doc_words(rng, step, 12)),
                    AcceptReport("accept_as_new_version"
                                 if rng.random() < 0.5 else "accept"))
        index.apply(lake.changes_since(index.epoch.lake_seq_covered), lake)
        for c in index.chunks():
            dv = lake.get(c.doc_key, version=c.version)
            assert dv.status == "live"


def test_embedding_drift_reported_per_epoch():
    rng = random.Random(21)
    lake = DataLake()
    index = SearchIndex(ChunkPolicy(32, 4))
    for i in range(6):
        lake.upsert(make_doc(f"d{i}", doc_words(rng, i, 20)), AcceptReport())
    index.apply(lake.changes_since(0), lake)
    # unchanged corpus: drift between consecutive epochs is ~0
    index.apply(lake.changes_since(lake.lake_seq), lake)
    assert index.drift_history[-1][1] == pytest.approx(0.0, abs=1e-12)
    # replace half the corpus with disjoint vocabulary
    for i in range(3):
        lake.upsert(make_doc(f"d{i}", doc_words(rng, i + 500, 20)),
                    AcceptReport("accept_as_new_version"))
    index.apply(lake.changes_since(index.epoch.lake_seq_covered), lake)
    assert index.drift_history[-1][1] >= 0.3
