"""HTTP binding: the programmatic client boundary.

Query-path endpoints (/query, /ingest, /trace, /lineage,
/reports/coverage, /health) plus admin endpoints mirroring the CLI so
every operation is reachable from both surfaces.
"""

from __future__ import annotations

import json

from fastapi import Body, FastAPI, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .app import RagOpsApp
from .errors import (AccessDenied, Blocked, ConfigError, EmptyWindow,
                     GenerationUnavailable, InvalidTarget, InvalidTransition,
                     NotActive, NotFound, OutOfRange, PolicyViolation,
                     RejectedInput, RetrievalUnavailable)
from .ingestion import NormalizedDocument, _item_from_feed_line
from .observability import SpanNode

_STATUS = {
    RejectedInput: 400, ConfigError: 400, PolicyViolation: 400,
    InvalidTransition: 409, InvalidTarget: 409, Blocked: 409,
    AccessDenied: 403, NotFound: 404, OutOfRange: 416, NotActive: 409,
    EmptyWindow: 404, RetrievalUnavailable: 503, GenerationUnavailable: 503,
}


def _span_to_dict(node: SpanNode) -> dict:
    d = node.event.to_dict()
    d["orphan"] = node.orphan
    d["children"] = [_span_to_dict(c) for c in node.children]
    return d


def create_service(app: RagOpsApp) -> FastAPI:
    api = FastAPI(title="ragops", version="0.1.0")

    @api.exception_handler(Exception)
    async def _handle(request: Request, exc: Exception):
        for klass, status in _STATUS.items():
            if isinstance(exc, klass):
                return JSONResponse({"error": type(exc).__name__,
                                     "detail": str(exc)}, status_code=status)
        return JSONResponse({"error": "InternalError", "detail": str(exc)},
                            status_code=500)

    @api.get("/health")
    def health():
        return app.health()

    @api.post("/query")
    def query(body: dict = Body(...)):
        if not isinstance(body.get("query"), str) or not body["query"].strip():
            return JSONResponse({"error": "BadRequest",
                                 "detail": "body needs a non-empty 'query'"},
                                status_code=400)
        return app.query(body["query"], body.get("role"),
                         body.get("query_id"))

    @api.post("/ingest")
    async def ingest(request: Request,
                     source_id: str = Query(default="http-ingest")):
        try:
            cfg = app.source_by_id(source_id)
        except NotFound:
            from .ingestion import SourceConfig

            cfg = SourceConfig(source_id=source_id, kind="manual")
        body = (await request.body()).decode("utf-8")
        items = []
        from .textutils import utcnow

        now = utcnow()
        for i, line in enumerate(body.splitlines()):
            if line.strip():
                items.append(_item_from_feed_line(cfg, line, i, now))
        return app.ingest_items(items, cfg)

    @api.post("/verify")
    def verify_doc(body: dict = Body(...)):
        doc = NormalizedDocument(
            doc_key=body["doc_key"], text=body.get("text", ""),
            metadata=body.get("metadata", {"extra": {}}),
            acl=tuple(body.get("acl", ())),
            operation=body.get("operation", "add"))
        return app.verify_only(doc)

    @api.get("/trace/{trace_id}")
    def trace(trace_id: str):
        tree = app.tracer.trace(trace_id)
        return {"trace_id": tree.trace_id,
                "spans": [_span_to_dict(r) for r in tree.roots]}

    @api.get("/lineage/{response_id}")
    def lineage(response_id: str):
        return app.tracer.lineage(response_id, app.lake).to_dict()

    @api.get("/reports/coverage")
    def coverage_reports():
        return {"reports": sorted(app.reports.values(),
                                  key=lambda r: r.get("report_id", ""))}

    @api.get("/review")
    def review_list():
        return {"tickets": app.tickets.to_dicts()}

    @api.post("/review/{ticket_id}/resolve")
    def review_resolve(ticket_id: str, body: dict = Body(...)):
        resolution = body.get("resolution", "")
        ticket = app.tickets.resolve(ticket_id, resolution,
                                     body.get("resolver", "api"))
        return ticket.to_dict()

    @api.get("/lake/export")
    def lake_export():
        lines = "\n".join(app.lake.export_jsonl())
        return PlainTextResponse(lines, media_type="application/x-ndjson")

    # ------------------------------------------------------------- admin
    @api.post("/admin/reindex")
    def admin_reindex(body: dict = Body(default={})):
        return app.reindex(full=bool(body.get("full", False)))

    @api.post("/admin/test")
    def admin_test(body: dict = Body(...)):
        cases = app.load_suite(body.get("suite"))
        report = app.run_tests(body.get("level", "end_to_end"), cases,
                               seed=int(body.get("seed", 0)))
        return report.to_dict()

    @api.post("/admin/coverage")
    def admin_coverage(body: dict = Body(default={})):
        reports = app.coverage_reports(
            window_seconds=float(body.get("window_seconds", 86400.0)),
            suite_path=body.get("suite"))
        return {"reports": [r.to_dict() for r in reports],
                "alerts": [a.to_dict() for a in app.alerts]}

    @api.post("/admin/deploy")
    def admin_deploy(body: dict = Body(...)):
        action = body.get("action")
        if action == "start":
            return app.deploy(body["strategy"], body["candidate"],
                              ab_pct=int(body.get("pct", 0)),
                              stage_schedule=[tuple(s) for s in
                                              body.get("schedule", ())])
        if action == "advance":
            return app.advance_deployment()
        if action == "recall":
            return app.recall_deployment(body.get("reason", ""))
        if action == "shadow_report":
            return app.shadow_report()
        raise ConfigError(f"unknown deploy action {action!r}")

    return api


def serve(app: RagOpsApp, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_service(app), host=host, port=port)
