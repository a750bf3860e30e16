"""Three-level offline testing: module (embedder), component (retrieval),
end-to-end (full pipeline with the deterministic mock client), plus
threshold-based release gating.

Reports separate deterministic quality metrics from wall-clock timing
stats: with a fixed seed and the mock client, the metrics section of two
runs over the same corpus snapshot is byte-identical; timing, like
created_at, is timestamp-derived and excluded from that guarantee.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetric
from .metrics import (bleu, faithfulness, mrr, ndcg_at_k, precision_at_k,
                      recall_at_k, rouge_n)
from .metrics import embedding_drift  # noqa: F401  (module surface)
from .retrieval import embed, parse_chunk_id
from .textutils import utcnow

LEVELS = ("module", "component", "end_to_end")


@dataclass(frozen=True)
class TestCase:
    case_id: str
    query: str
    relevant_chunks: tuple[str, ...] = ()
    relevant_doc_keys: tuple[str, ...] = ()
    reference_answer: str | None = None
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if (not self.relevant_chunks and not self.relevant_doc_keys
                and self.reference_answer is None):
            raise UndefinedMetric(
                f"case {self.case_id}: needs a relevant set or a reference answer")


def load_cases_jsonl(path) -> list[TestCase]:
    """Test sets are JSONL: one case object per line."""
    cases = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            cases.append(TestCase(
                case_id=str(d["case_id"]), query=d["query"],
                relevant_chunks=tuple(d.get("relevant_chunks", ())),
                relevant_doc_keys=tuple(d.get("relevant_doc_keys", ())),
                reference_answer=d.get("reference_answer"),
                tags=tuple(d.get("tags", ()))))
    return cases


@dataclass
class MetricReport:
    level: str
    metrics: dict[str, float]
    timing: dict[str, float]
    n_cases: int
    seed: int
    pipeline_version: str
    index_epoch: int
    created_at: float
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "timing": {k: self.timing[k] for k in sorted(self.timing)},
            "n_cases": self.n_cases, "seed": self.seed,
            "pipeline_version": self.pipeline_version,
            "index_epoch": self.index_epoch, "created_at": self.created_at,
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def deterministic_view(self) -> dict:
        """Everything that must be identical across reruns with the same
        seed and corpus snapshot (timestamp-derived fields excluded)."""
        d = self.to_dict()
        d.pop("created_at")
        d.pop("timing")
        return d


@dataclass
class SuiteVerdict:
    passed: bool
    failures: list[dict]
    baseline_ref: str | None = None

    def to_dict(self) -> dict:
        return {"pass": self.passed, "failures": self.failures,
                "baseline_ref": self.baseline_ref}


def _mean(values) -> float:
    values = list(values)
    if not values:
        return 0.0
    return math.fsum(values) / len(values)


def _run_module_level(cases, pipeline, seed) -> tuple[dict, dict, list]:
    """Embedder checks: self-similarity, determinism drift, latency."""
    self_sims = []
    latencies = []
    first_pass = []
    second_pass = []
    skipped = []
    for case in cases:
        t0 = time.perf_counter()
        try:
            e1 = embed(case.query)
        except Exception:
            skipped.append(case.case_id)
            continue
        latencies.append((time.perf_counter() - t0) * 1000.0)
        e2 = embed(case.query)
        self_sims.append(float(np.dot(e1.vector, e2.vector)))
        first_pass.append(e1.vector)
        second_pass.append(e2.vector)
    metrics = {}
    if self_sims:
        metrics["cosine_self_sim"] = _mean(self_sims)
        c1 = np.mean(np.stack(first_pass), axis=0)
        c2 = np.mean(np.stack(second_pass), axis=0)
        metrics["embedding_drift"] = embedding_drift(c1, c2)
        metrics["unit_norm_error"] = _mean(
            abs(float(np.linalg.norm(v)) - 1.0) for v in first_pass)
    timing = {"embedding_latency_ms_mean": _mean(latencies)} if latencies else {}
    return metrics, timing, skipped


def _doc_ranking(hits, index) -> list[str]:
    """Collapse a ranked chunk list to a ranked doc list (first occurrence)."""
    seen = []
    for hit in hits:
        doc_key, _, _ = parse_chunk_id(hit.chunk_id)
        if doc_key not in seen:
            seen.append(doc_key)
    return seen


def _run_component_level(cases, pipeline, seed) -> tuple[dict, dict, list]:
    """Retrieval quality against known-relevant sets."""
    index = pipeline.index
    per_recall = {1: [], 5: [], 10: []}
    per_precision = {1: [], 5: [], 10: []}
    ndcgs = []
    ranks = []
    latencies = []
    skipped = []
    known_chunks = {c.chunk_id for c in index.chunks()}
    known_docs = {c.doc_key for c in index.chunks()}
    for case in cases:
        relevant_chunks = set(case.relevant_chunks)
        relevant_docs = set(case.relevant_doc_keys)
        if not relevant_chunks and not relevant_docs:
            skipped.append(case.case_id)
            continue
        if (relevant_docs - known_docs) or (relevant_chunks - known_chunks):
            skipped.append(case.case_id)  # unresolvable ids
            continue
        t0 = time.perf_counter()
        try:
            hits = index.search_vector(embed(case.query), k=10)
        except Exception:
            skipped.append(case.case_id)
            continue
        latencies.append((time.perf_counter() - t0) * 1000.0)
        if relevant_docs:
            ranked = _doc_ranking(hits, index)
            relevant = relevant_docs
        else:
            ranked = [h.chunk_id for h in hits]
            relevant = relevant_chunks
        for k in per_recall:
            per_recall[k].append(recall_at_k(ranked, relevant, k))
            per_precision[k].append(precision_at_k(ranked, relevant, k))
        gains = [1.0 if r in relevant else 0.0 for r in ranked]
        ndcgs.append(ndcg_at_k(gains, 10))
        rank = next((i for i, r in enumerate(ranked, start=1) if r in relevant),
                    None)
        ranks.append(rank)
    metrics = {}
    if ranks:
        for k in per_recall:
            metrics[f"recall@{k}"] = _mean(per_recall[k])
            metrics[f"precision@{k}"] = _mean(per_precision[k])
        metrics["mrr"] = mrr(ranks)
        metrics["ndcg@10"] = _mean(ndcgs)
    timing = {"retrieval_latency_ms_mean": _mean(latencies)} if latencies else {}
    return metrics, timing, skipped


def _run_e2e_level(cases, pipeline, seed) -> tuple[dict, dict, list]:
    """Full answer() runs: groundedness plus reference-answer overlap."""
    faiths = []
    bleus = []
    rouge1 = []
    rouge2 = []
    latencies = []
    skipped = []
    for case in cases:
        t0 = time.perf_counter()
        try:
            response = pipeline.answer(case.query)
        except Exception:
            skipped.append(case.case_id)
            continue
        latencies.append((time.perf_counter() - t0) * 1000.0)
        context_texts = _trace_context_texts(pipeline, response)
        faiths.append(faithfulness(response.answer, context_texts))
        if case.reference_answer:
            bleus.append(bleu(response.answer, [case.reference_answer]))
            rouge1.append(rouge_n(response.answer, case.reference_answer, 1)["f1"])
            rouge2.append(rouge_n(response.answer, case.reference_answer, 2)["f1"])
    metrics = {}
    if faiths:
        metrics["faithfulness"] = _mean(faiths)
        metrics["hallucination_rate"] = 1.0 - metrics["faithfulness"]
    if bleus:
        metrics["bleu"] = _mean(bleus)
        metrics["rouge1_f1"] = _mean(rouge1)
        metrics["rouge2_f1"] = _mean(rouge2)
    timing = {"pipeline_latency_ms_mean": _mean(latencies)} if latencies else {}
    return metrics, timing, skipped


def _trace_context_texts(pipeline, response) -> list[str]:
    texts = []
    for event in pipeline.tracer.events(response.trace_id):
        if event.operation == "validate_response" and "retained_refs" in event.attrs:
            texts = [pipeline.index.get_chunk(ref).text
                     for ref in event.attrs["retained_refs"]
                     if pipeline.index.get_chunk(ref) is not None]
    return texts


def run_suite(level: str, cases: list[TestCase], pipeline,
              seed: int = 0) -> MetricReport:
    """Run one suite level and aggregate (order-independent fsum means).

    Unresolvable cases are listed in skipped and excluded from n_cases.
    """
    if level not in LEVELS:
        raise UndefinedMetric(f"unknown level: {level!r}")
    runner = {"module": _run_module_level,
              "component": _run_component_level,
              "end_to_end": _run_e2e_level}[level]
    metrics, timing, skipped = runner(cases, pipeline, seed)
    return MetricReport(
        level=level, metrics=metrics, timing=timing,
        n_cases=len(cases) - len(skipped), seed=seed,
        pipeline_version=pipeline.version_id,
        index_epoch=pipeline.index.epoch.epoch,
        created_at=utcnow(), skipped=skipped)


def gate_release(report: MetricReport, thresholds: dict[str, float],
                 baseline: MetricReport | None = None,
                 epsilon: float = 0.02) -> SuiteVerdict:
    """Fail any metric below its absolute threshold (>= passes) or
    regressing more than epsilon absolute against the baseline."""
    failures = []
    for name, threshold in thresholds.items():
        value = report.metrics.get(name)
        if value is None:
            failures.append({"metric": name, "value": None,
                             "threshold": threshold})
        elif value < threshold:
            failures.append({"metric": name, "value": value,
                             "threshold": threshold})
    if baseline is not None:
        for name, base_value in baseline.metrics.items():
            value = report.metrics.get(name)
            if value is not None and value < base_value - epsilon:
                failures.append({"metric": name, "value": value,
                                 "threshold": base_value - epsilon})
    return SuiteVerdict(passed=not failures, failures=failures)
