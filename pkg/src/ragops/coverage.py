"""Coverage checking across four axes: query, retrieval, generation,
vocabulary. Compares a window of live traffic against the offline test
set and raises threshold-driven alerts: coverage breaches ask for test
set expansion, live metric breaches send the pipeline version back to
offline testing (the rollout module consumes those).

Report ids are content digests, so reports are pure functions of their
window and configuration.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import js_divergence, term_distribution
from .retrieval import embed, parse_chunk_id
from .textutils import stable_digest, tokenize

DEFAULT_POPULATION_THRESHOLD = 0.85  # breach when coverage drops below this
DEFAULT_TAU_SIM = 0.7

EXPAND_TEST_SET = "expand_test_set"
INVESTIGATE_PIPELINE = "investigate_pipeline"


@dataclass
class CoverageReport:
    axis: str
    window: tuple[float, float]
    score: float | None
    threshold: float
    breach: bool
    details: dict
    report_id: str = ""

    def __post_init__(self):
        if not self.report_id:
            blob = json.dumps(
                {"axis": self.axis, "window": list(self.window),
                 "score": self.score, "threshold": self.threshold,
                 "details": self.details}, sort_keys=True, default=str)
            self.report_id = stable_digest(blob.encode("utf-8"))[:16]

    def to_dict(self) -> dict:
        return {"axis": self.axis, "window": list(self.window),
                "score": self.score, "threshold": self.threshold,
                "breach": self.breach, "details": self.details,
                "report_id": self.report_id}


@dataclass
class VocabDriftReport(CoverageReport):
    new_terms: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["new_terms"] = self.new_terms
        return d


@dataclass
class Alert:
    alert_id: str
    kind: str  # coverage_breach | metric_breach
    evidence: str  # report id or metric reference
    action_hint: str

    def to_dict(self) -> dict:
        return {"alert_id": self.alert_id, "kind": self.kind,
                "evidence": self.evidence, "action_hint": self.action_hint}


def _embed_all(texts: list[str]) -> list[np.ndarray | None]:
    out = []
    for text in texts:
        try:
            out.append(embed(text).vector)
        except Exception:
            out.append(None)
    return out


def query_coverage(live_queries: list[str], test_queries: list[str],
                   tau_sim: float = DEFAULT_TAU_SIM,
                   threshold: float = DEFAULT_POPULATION_THRESHOLD,
                   window: tuple[float, float] = (0.0, 0.0)) -> CoverageReport:
    """Fraction of live queries whose best cosine against any test query
    reaches tau_sim. Below-threshold fractions breach and suggest test
    set expansion; details list the least-covered live queries (emerging
    cluster candidates)."""
    if not test_queries:
        raise ConfigError("query coverage needs a non-empty test set")
    if not live_queries:
        return CoverageReport("query", window, None, threshold, False,
                              {"note": "empty live window"})
    test_vecs = [v for v in _embed_all(test_queries) if v is not None]
    if not test_vecs:
        raise ConfigError("test queries produced no embeddings")
    matrix = np.stack(test_vecs)
    covered = 0
    worst: list[tuple[float, str]] = []
    for query, vec in zip(live_queries, _embed_all(live_queries)):
        best = 0.0
        if vec is not None:
            best = float(np.max(matrix @ vec))
        if best >= tau_sim:
            covered += 1
        worst.append((best, query))
    worst.sort()
    score = covered / len(live_queries)
    return CoverageReport(
        "query", window, score, threshold, score < threshold,
        {"tau_sim": tau_sim, "n_live": len(live_queries),
         "n_test": len(test_queries),
         "lowest_similarity": [[round(s, 4), q] for s, q in worst[:10]]})


def retrieval_coverage(live_traces: list[dict], test_cases,
                       k: int = 5,
                       threshold: float = DEFAULT_POPULATION_THRESHOLD,
                       window: tuple[float, float] = (0.0, 0.0)) -> CoverageReport:
    """Fraction of live queries whose top-k retrieved documents intersect
    the documents referenced by the test set. live_traces entries carry
    {"query": str, "retrieved_refs": [chunk ids in rank order]}."""
    covered_docs: set[str] = set()
    for case in test_cases:
        covered_docs.update(case.relevant_doc_keys)
        for cid in case.relevant_chunks:
            covered_docs.add(parse_chunk_id(cid)[0])
    if not live_traces:
        return CoverageReport("retrieval", window, None, threshold, False,
                              {"note": "empty live window",
                               "covered_docs": len(covered_docs)})
    hits = 0
    out_of_scope: Counter = Counter()
    for trace in live_traces:
        docs = []
        for ref in trace.get("retrieved_refs", ())[:k]:
            try:
                docs.append(parse_chunk_id(ref)[0])
            except ValueError:
                continue
        if set(docs) & covered_docs:
            hits += 1
        for doc in set(docs) - covered_docs:
            out_of_scope[doc] += 1
    score = hits / len(live_traces)
    return CoverageReport(
        "retrieval", window, score, threshold, score < threshold,
        {"k": k, "n_live": len(live_traces),
         "out_of_scope_docs": [d for d, _ in out_of_scope.most_common(10)]})


def generation_coverage(live_answers: list[str],
                        test_reference_answers: list[str],
                        threshold: float = DEFAULT_POPULATION_THRESHOLD,
                        window: tuple[float, float] = (0.0, 0.0)) -> CoverageReport:
    """Term-distribution agreement between live answers and the test
    references: 1 - JensenShannon (base 2) over the union vocabulary."""
    if not live_answers or not test_reference_answers:
        raise ConfigError("generation coverage needs both live answers "
                          "and test references")
    live_dist = term_distribution(live_answers)
    test_dist = term_distribution(test_reference_answers)
    if not live_dist or not test_dist:
        raise ConfigError("generation coverage needs tokenizable text")
    score = 1.0 - js_divergence(live_dist, test_dist)
    return CoverageReport(
        "generation", window, score, threshold, score < threshold,
        {"n_live": len(live_answers), "n_test": len(test_reference_answers),
         "live_vocab": len(live_dist), "test_vocab": len(test_dist)})


def vocabulary_coverage(live_texts: list[str], test_texts: list[str],
                        top_m: int = 50,
                        threshold: float = DEFAULT_POPULATION_THRESHOLD,
                        window: tuple[float, float] = (0.0, 0.0)) -> VocabDriftReport:
    """Flag the strongest live terms (by TF-IDF over live texts) that are
    absent from the test vocabulary; score is 1 minus the live frequency
    share of those new terms."""
    if not live_texts:
        return VocabDriftReport("vocabulary", window, None, threshold, False,
                                {"note": "empty live window"})
    test_vocab = set()
    for text in test_texts:
        test_vocab.update(tokenize(text))
    docs = [tokenize(text) for text in live_texts]
    n_docs = len(docs)
    df: Counter = Counter()
    tf: Counter = Counter()
    for tokens in docs:
        tf.update(tokens)
        df.update(set(tokens))
    tfidf = {term: count * (math.log((1 + n_docs) / (1 + df[term])) + 1.0)
             for term, count in tf.items()}
    ranked = sorted(tfidf, key=lambda t: (-tfidf[t], t))
    new_terms = [t for t in ranked if t not in test_vocab][:top_m]
    total = sum(tf.values())
    new_share = sum(tf[t] for t in new_terms) / total if total else 0.0
    score = 1.0 - new_share
    return VocabDriftReport(
        "vocabulary", window, score, threshold, score < threshold,
        {"top_m": top_m, "n_live": len(live_texts)}, new_terms=new_terms)


@dataclass(frozen=True)
class AlertPolicy:
    # metric name -> ("min"|"max", limit); min-bounded metrics breach when
    # the observed value drops below the limit, max-bounded when above.
    metric_limits: dict = field(default_factory=dict)


def check_thresholds(reports: list, policy: AlertPolicy | None = None,
                     live_metrics: dict[str, float] | None = None) -> list[Alert]:
    """One alert per breach: coverage breaches suggest expanding the test
    set; live metric breaches mark the pipeline for investigation (return
    to offline testing)."""
    policy = policy or AlertPolicy()
    alerts: list[Alert] = []
    metric_values = dict(live_metrics or {})
    for report in reports:
        if getattr(report, "breach", False):
            alerts.append(Alert(
                alert_id=f"alert-{report.report_id}",
                kind="coverage_breach", evidence=report.report_id,
                action_hint=EXPAND_TEST_SET))
        elif hasattr(report, "metrics") and isinstance(report.metrics, dict):
            metric_values.update(report.metrics)  # live MetricReport entries
    for name, value in metric_values.items():
        rule = policy.metric_limits.get(name)
        if rule is None:
            continue
        direction, limit = rule
        breached = value < limit if direction == "min" else value > limit
        if breached:
            alerts.append(Alert(
                alert_id=f"alert-metric-{name}-{stable_digest(str(value).encode())[:8]}",
                kind="metric_breach", evidence=f"metric:{name}={value}",
                action_hint=INVESTIGATE_PIPELINE))
    return alerts
