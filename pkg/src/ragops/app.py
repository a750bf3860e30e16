"""Application runtime binding all modules: the operable system behind
both the CLI and the HTTP service.

Owns the lake, the search index, the trace store, conflict tickets, the
version registry and deployments, and persists operational state (source
cursors, tickets, versions, deployments, reports) under the configured
data directory. The index is derived state and is rebuilt from the lake
at startup.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path

from .config import DeploymentConfig
from .coverage import (check_thresholds, generation_coverage, query_coverage,
                       retrieval_coverage, vocabulary_coverage)
from .datalake import DataLake
from .errors import ConfigError, NotFound
from .evaluation import MetricReport, TestCase, gate_release, load_cases_jsonl, run_suite
from .guardrails import RailEngine
from .ingestion import RawItem, SourceConfig, ingest_batch, poll_source
from .observability import TraceStore
from .pipeline import PipelineSettings, QueryPipeline
from .retrieval import SearchIndex
from .rollout import (LIVE, OFFLINE_PASSED, RolloutManager, VersionRegistry,
                      compare_shadow)
from .textutils import utcnow
from .verification import (STALE_IGNORE, CorpusView, TicketStore,
                           VerificationPolicy, verify)

logger = logging.getLogger(__name__)


class RagOpsApp:
    """One configured deployment of the system."""

    def __init__(self, config: DeploymentConfig | None = None):
        self.config = config or DeploymentConfig()
        self._lock = threading.RLock()
        data_dir = Path(self.config.data_dir) if self.config.data_dir else None
        self.data_dir = data_dir
        if data_dir:
            data_dir.mkdir(parents=True, exist_ok=True)
        self.lake = DataLake(data_dir / "lake" if data_dir else None)
        self.tracer = TraceStore(data_dir / "traces" if data_dir else None)
        self.tickets = TicketStore(lake=self.lake)
        self.index = SearchIndex(self.config.chunking, self.config.embedder_id)
        self.registry = VersionRegistry()
        self.rollout = RolloutManager(self.registry)
        self.alerts: list = []
        self.reports: dict[str, dict] = {}
        self.metric_reports: dict[str, MetricReport] = {}
        self._cursors: dict[str, str] = {}
        self._pipelines: dict[str, QueryPipeline] = {}
        self._version_settings: dict[str, PipelineSettings] = {}
        self._load_state()
        self.index.rebuild(self.lake)

        version_id = f"v-{self.config.digest()}"
        if version_id not in {v.version_id for v in self.registry.all_versions()}:
            self.registry.register(version_id, self.config.digest(), LIVE
                                   if self.registry.live_version() is None
                                   else OFFLINE_PASSED)
        self.version_id = version_id
        self._version_settings[version_id] = self.config.pipeline

    # ------------------------------------------------------------------
    # state persistence

    def _state_path(self) -> Path | None:
        return self.data_dir / "state.json" if self.data_dir else None

    def _load_state(self) -> None:
        path = self._state_path()
        if not path or not path.exists():
            return
        state = json.loads(path.read_text(encoding="utf-8"))
        self._cursors = state.get("cursors", {})
        self.tickets.load_dicts(state.get("tickets", []))
        for v in state.get("versions", []):
            self.registry.register(v["version_id"], v["config_digest"],
                                   v["state"])
        self.reports = state.get("reports", {})

    def save_state(self) -> None:
        path = self._state_path()
        if not path:
            return
        state = {
            "cursors": self._cursors,
            "tickets": self.tickets.to_dicts(),
            "versions": [{"version_id": v.version_id,
                          "config_digest": v.config_digest, "state": v.state}
                         for v in self.registry.all_versions()],
            "reports": self.reports,
        }
        path.write_text(json.dumps(state, sort_keys=True, indent=1),
                        encoding="utf-8")

    # ------------------------------------------------------------------
    # pipelines

    def pipeline_for(self, version_id: str | None = None) -> QueryPipeline:
        version_id = version_id or self.version_id
        if version_id not in self._pipelines:
            settings = self._version_settings.get(version_id,
                                                  self.config.pipeline)
            self._pipelines[version_id] = QueryPipeline(
                index=self.index, lake=self.lake,
                rails=RailEngine(self.config.rails), settings=settings,
                client=self.config.llm.build(), tracer=self.tracer,
                version_id=version_id)
        return self._pipelines[version_id]

    def register_candidate(self, version_id: str,
                           settings: PipelineSettings,
                           config_digest: str = "") -> None:
        """Candidate pipeline versions share the lake and index but may
        differ in query-level settings."""
        self.registry.register(version_id, config_digest or version_id)
        self._version_settings[version_id] = settings

    # ------------------------------------------------------------------
    # ingestion flow

    def source_by_id(self, source_id: str) -> SourceConfig:
        for source in self.config.sources:
            if source.source_id == source_id:
                return source
        raise NotFound(f"unknown source: {source_id!r}")

    def ingest_source(self, source_id_or_path: str, fetch=None) -> dict:
        """Poll one source (or an ad-hoc directory), verify and apply."""
        try:
            cfg = self.source_by_id(source_id_or_path)
        except NotFound:
            if Path(source_id_or_path).is_dir():
                cfg = SourceConfig(source_id=Path(source_id_or_path).name,
                                   kind="file_dir",
                                   location=source_id_or_path)
            else:
                raise
        items, cursor = poll_source(cfg, self._cursors.get(cfg.source_id),
                                    fetch=fetch)
        summary = self.ingest_items(items, cfg)
        self._cursors[cfg.source_id] = cursor
        self.save_state()
        return summary

    def ingest_items(self, items: list[RawItem], cfg: SourceConfig) -> dict:
        """Normalize, verify, apply to the lake, refresh the index."""
        receipt = ingest_batch(items, cfg)
        corpus = CorpusView(self.lake)
        policy = self.config.verification
        outcomes = {"polled": len(items), "normalized": receipt.normalized,
                    "quarantined": receipt.quarantined, "accepted": 0,
                    "new_versions": 0, "duplicates": 0, "stale": 0,
                    "held": 0, "rejected": 0, "deleted": 0,
                    "tickets_opened": 0}
        if self.data_dir and receipt.quarantined:
            with open(self.data_dir / "quarantine.jsonl", "a",
                      encoding="utf-8") as fh:
                for disp in receipt.dispositions:
                    if disp.status != "normalized":
                        fh.write(json.dumps({
                            "source_id": cfg.source_id,
                            "external_id": disp.external_id,
                            "status": disp.status, "reason": disp.reason,
                            "at": utcnow()}) + "\n")
        for doc in receipt.documents:
            if doc.operation == "delete":
                try:
                    self.lake.delete(doc.doc_key)
                    outcomes["deleted"] += 1
                except NotFound:
                    logger.info("delete for unknown doc %s ignored", doc.doc_key)
                continue
            report = verify(doc, corpus, policy)
            self.tickets.register(report.tickets)
            outcomes["tickets_opened"] += sum(
                1 for t in report.tickets if t.status == "open")
            if report.decision == "accept":
                self.lake.upsert(doc, report)
                outcomes["accepted"] += 1
            elif report.decision == "accept_as_new_version":
                self.lake.upsert(doc, report)
                outcomes["new_versions"] += 1
            elif report.decision == "drop_duplicate":
                outcomes["duplicates"] += 1
            elif report.decision == STALE_IGNORE:
                outcomes["stale"] += 1
            elif report.decision == "hold_for_review":
                outcomes["held"] += 1
            else:
                outcomes["rejected"] += 1
        self.reindex(full=False)
        self.save_state()
        return outcomes

    def verify_only(self, doc) -> dict:
        """Run verification without applying anything."""
        report = verify(doc, CorpusView(self.lake), self.config.verification)
        return {
            "doc_key": report.doc_key, "decision": report.decision,
            "results": [{"check": r.check, "verdict": r.verdict,
                         "detail": r.detail} for r in report.results],
            "tickets": [t.to_dict() for t in report.tickets],
        }

    def reindex(self, full: bool = False) -> dict:
        with self._lock:
            if full or self.index.epoch.lake_seq_covered > self.lake.lake_seq:
                epoch = self.index.rebuild(self.lake)
            else:
                changes = self.lake.changes_since(
                    self.index.epoch.lake_seq_covered)
                epoch = self.index.apply(changes, self.lake)
            return epoch.to_dict()

    # ------------------------------------------------------------------
    # query flow

    def query(self, q: str, role: str | None = None,
              query_id: str | None = None) -> dict:
        """Answer under the active deployment (if any): the served
        response always comes from the routed 'serve' version; shadow
        candidates run additionally but never reach the caller."""
        deployment = self.rollout.active_deployment()
        qid = query_id or q
        if deployment is None:
            response = self.pipeline_for().answer(q, role, query_id=qid)
            return response.to_dict()
        assignment = self.rollout.route(qid)
        serve_pipeline = self.pipeline_for(assignment.serve)
        response = serve_pipeline.answer(
            q, role, query_id=qid,
            trace_attrs={"deployment_role": "served",
                         "deployment_id": deployment.deployment_id})
        if assignment.also_run:
            try:
                self.pipeline_for(assignment.also_run).answer(
                    q, role, query_id=qid,
                    trace_attrs={"deployment_role": "shadow",
                                 "deployment_id": deployment.deployment_id})
            except Exception as exc:
                logger.warning("shadow run failed for %r: %s", qid, exc)
        return response.to_dict()

    # ------------------------------------------------------------------
    # evaluation and coverage

    def load_suite(self, path: str | None = None) -> list[TestCase]:
        path = path or self.config.test_suite
        if not path:
            raise ConfigError("no test suite configured")
        return load_cases_jsonl(path)

    def run_tests(self, level: str, cases: list[TestCase],
                  seed: int = 0) -> MetricReport:
        report = run_suite(level, cases, self.pipeline_for(), seed=seed)
        key = f"{level}-{seed}-{int(report.created_at * 1000)}"
        self.metric_reports[key] = report
        if self.data_dir:
            reports_dir = self.data_dir / "reports"
            reports_dir.mkdir(exist_ok=True)
            (reports_dir / f"metrics-{key}.json").write_text(
                report.to_json(), encoding="utf-8")
        return report

    def gate(self, report: MetricReport, baseline: MetricReport | None = None):
        verdict = gate_release(report, self.config.thresholds.gate, baseline,
                               self.config.thresholds.gate_epsilon)
        return verdict

    def _live_window(self, window_seconds: float) -> list:
        now = utcnow()
        events = []
        for event in self.tracer.events():
            if event.operation != "validate_response":
                continue
            if "retained_refs" not in event.attrs:
                continue
            if now - window_seconds <= event.ended_at <= now:
                events.append(event)
        return events

    def coverage_reports(self, window_seconds: float = 86400.0,
                         suite_path: str | None = None) -> list:
        """Compute all four coverage axes over the trace window against
        the configured test suite, persist them, and raise alerts."""
        cases = self.load_suite(suite_path)
        events = self._live_window(window_seconds)
        now = utcnow()
        window = (now - window_seconds, now)
        live_queries = []
        live_traces = []
        live_answers = []
        for event in events:
            payload = self.tracer.payload(event)
            query = payload["input"] if isinstance(payload["input"], str) else ""
            answer = payload["output"].get("answer", "") \
                if isinstance(payload["output"], dict) else ""
            # the validation span's input payload is the draft; recover the
            # user query from the trace's enhance span instead
            for sibling in self.tracer.events(event.trace_id):
                if sibling.operation == "enhance_query":
                    sibling_payload = self.tracer.payload(sibling)
                    if isinstance(sibling_payload["input"], str):
                        query = sibling_payload["input"]
                    break
            live_queries.append(query)
            live_answers.append(answer)
            live_traces.append({
                "query": query,
                "retrieved_refs": list(event.attrs.get("retrieved_refs", ()))})
        thresholds = self.config.thresholds
        reports = []
        reports.append(query_coverage(
            live_queries, [c.query for c in cases],
            tau_sim=thresholds.tau_sim,
            threshold=thresholds.coverage.get("query", 0.85), window=window))
        reports.append(retrieval_coverage(
            live_traces, cases,
            threshold=thresholds.coverage.get("retrieval", 0.85),
            window=window))
        references = [c.reference_answer for c in cases if c.reference_answer]
        if live_answers and references:
            reports.append(generation_coverage(
                live_answers, references,
                threshold=thresholds.coverage.get("generation", 0.85),
                window=window))
        reports.append(vocabulary_coverage(
            live_queries, [c.query for c in cases] + references,
            threshold=thresholds.coverage.get("vocabulary", 0.85),
            window=window))
        for report in reports:
            self.reports[report.report_id] = report.to_dict()
        new_alerts = check_thresholds(reports, thresholds.alert_policy())
        self.alerts.extend(new_alerts)
        if self.data_dir:
            reports_dir = self.data_dir / "reports"
            reports_dir.mkdir(exist_ok=True)
            for report in reports:
                (reports_dir / f"coverage-{report.axis}-{report.report_id}.json"
                 ).write_text(json.dumps(report.to_dict(), sort_keys=True),
                              encoding="utf-8")
        self.save_state()
        return reports

    # ------------------------------------------------------------------
    # rollout operations

    def deploy(self, strategy: str, candidate: str, ab_pct: int = 0,
               stage_schedule=()) -> dict:
        dep = self.rollout.start(strategy, candidate, ab_pct=ab_pct,
                                 stage_schedule=tuple(stage_schedule))
        self.save_state()
        return dep.to_dict()

    def advance_deployment(self) -> dict:
        dep = self.rollout.active_deployment()
        if dep is None:
            raise NotFound("no active deployment")
        open_breaches = [a for a in self.alerts
                         if getattr(a, "kind", "") == "metric_breach"]
        result = self.rollout.advance(dep.deployment_id, open_breaches)
        self.save_state()
        return result.to_dict()

    def recall_deployment(self, reason: str) -> dict:
        dep = self.rollout.active_deployment()
        if dep is None:
            raise NotFound("no active deployment")
        alert_ids = tuple(getattr(a, "alert_id", "") for a in self.alerts)
        result = self.rollout.recall(dep.deployment_id, reason, alert_ids)
        self.save_state()
        return result.to_dict()

    def shadow_report(self) -> dict:
        dep = None
        for candidate in self.rollout.deployments():
            if candidate.strategy == "shadow":
                dep = candidate
        if dep is None:
            raise NotFound("no shadow deployment")
        report = compare_shadow(self.tracer, dep.control, dep.candidate)
        return report.to_dict()

    # ------------------------------------------------------------------
    def health(self) -> dict:
        return {
            "pipeline_version": self.version_id,
            "index_epoch": self.index.epoch.epoch,
            "lake_seq": self.lake.lake_seq,
            "chunk_count": self.index.epoch.chunk_count,
            "embedder_id": self.config.embedder_id,
            "trace_events": len(self.tracer.events()),
        }

    def close(self) -> None:
        self.save_state()
        self.lake.close()
        self.tracer.close()
