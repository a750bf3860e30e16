import random

import pytest

from ragops.datalake import DataLake
from ragops.guardrails import RailEngine, default_rails
from ragops.ingestion import NormalizedDocument
from ragops.observability import TraceStore
from ragops.pipeline import MockLLM, PipelineSettings, QueryPipeline
from ragops.retrieval import ChunkPolicy, SearchIndex
from ragops.verification import CorpusView, VerificationPolicy, verify


class AcceptReport:
    """Minimal stand-in for a verification report when tests drive the
    lake directly."""

    def __init__(self, decision="accept"):
        self.decision = decision


def make_doc(doc_key, text, ts=1700000000.0, source="s", acl=(), op="add",
             extra=None, authorship=None, title=None):
    metadata = {
        "timestamp": ts,
        "authorship": authorship,
        "source": source,
        "title": title,
        "extra": {"fetched_at": ts, **(extra or {})},
    }
    return NormalizedDocument(doc_key, text, metadata, tuple(acl), op)


def doc_words(rng: random.Random, doc_idx: int, n_tokens: int) -> str:
    """Sentence-shaped text over a vocabulary unique to this document, so
    cross-document cosine stays near zero."""
    words = []
    for i in range(n_tokens):
        words.append(f"w{doc_idx:03d}x{rng.randint(0, max(n_tokens // 2, 1)):03d}")
    sentences = []
    for start in range(0, len(words), 8):
        sentences.append(" ".join(words[start:start + 8]) + ".")
    return " ".join(sentences)


def fill_lake(lake: DataLake, docs: list[tuple[str, str]], ts=1700000000.0):
    for key, text in docs:
        lake.upsert(make_doc(key, text, ts=ts), AcceptReport())


def verified_insert(lake: DataLake, doc, policy=None):
    report = verify(doc, CorpusView(lake), policy or VerificationPolicy())
    if report.decision in ("accept", "accept_as_new_version"):
        lake.upsert(doc, report)
    return report


@pytest.fixture
def lake():
    return DataLake()


@pytest.fixture
def small_corpus_pipeline():
    """Three-document corpus wired into a full pipeline with MockLLM."""
    lake = DataLake()
    fill_lake(lake, [
        ("s/returns", "Returns are accepted within 30 days of purchase. "
                      "Refunds go back to the original payment method."),
        ("s/shipping", "Standard shipping takes five business days. "
                       "Express shipping arrives in two days."),
        ("s/warranty", "The warranty covers manufacturing defects for two "
                       "years from the purchase date."),
    ])
    index = SearchIndex(ChunkPolicy(64, 8))
    index.apply(lake.changes_since(0), lake)
    tracer = TraceStore()
    pipeline = QueryPipeline(index, lake, RailEngine(default_rails()),
                             PipelineSettings(), MockLLM(), tracer)
    return pipeline
