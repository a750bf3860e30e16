"""Cross-cutting trace layer: per-component input/output records keyed by
trace id, response lineage back to document versions, and windowed
metric statistics.

Trace records are small and scannable; bulky payloads (prompts, contexts,
drafts) live in a separate append-only payload log referenced by offset,
with digests stored on the event for integrity verification on read.
Records are hash-chained: each carries the digest of its predecessor, so
tampering with history is detectable.
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .errors import NotFound
from .textutils import stable_digest, utcnow

GENESIS = "0" * 64


def new_id() -> str:
    return uuid.uuid4().hex


def _canonical(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"),
                      default=str).encode("utf-8")


@dataclass(frozen=True)
class TraceEvent:
    trace_id: str
    span_id: str
    parent_span: str | None
    component: str
    operation: str
    started_at: float
    ended_at: float
    input_digest: str
    output_digest: str
    payload_ref: int
    versions: dict
    attrs: dict = field(default_factory=dict)
    chain_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "trace_id": self.trace_id, "span_id": self.span_id,
            "parent_span": self.parent_span, "component": self.component,
            "operation": self.operation, "started_at": self.started_at,
            "ended_at": self.ended_at, "input_digest": self.input_digest,
            "output_digest": self.output_digest,
            "payload_ref": self.payload_ref, "versions": self.versions,
            "attrs": self.attrs, "chain_digest": self.chain_digest,
        }


@dataclass
class SpanNode:
    event: TraceEvent
    children: list["SpanNode"] = field(default_factory=list)
    orphan: bool = False


@dataclass
class TraceTree:
    trace_id: str
    roots: list[SpanNode]

    def spans(self) -> list[TraceEvent]:
        out = []

        def walk(node):
            out.append(node.event)
            for child in node.children:
                walk(child)

        for root in self.roots:
            walk(root)
        return out

    def operations(self) -> list[str]:
        return [e.operation for e in sorted(self.spans(),
                                            key=lambda e: e.started_at)]


@dataclass
class LineageGraph:
    response_id: str
    trace_id: str
    query: str
    prompt: str
    answer: str
    chunk_ids: list[str]
    doc_versions: list[tuple[str, int]]
    rail_outcomes: list[dict]
    lake_seq: int

    def to_dict(self) -> dict:
        return {
            "response_id": self.response_id, "trace_id": self.trace_id,
            "query": self.query, "prompt": self.prompt, "answer": self.answer,
            "chunk_ids": self.chunk_ids,
            "doc_versions": [list(dv) for dv in self.doc_versions],
            "rail_outcomes": self.rail_outcomes, "lake_seq": self.lake_seq,
        }


@dataclass
class WindowStats:
    count: int
    mean: float | None
    p50: float | None
    p95: float | None
    max: float | None

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "p50": self.p50,
                "p95": self.p95, "max": self.max}


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile over pre-sorted values."""
    idx = max(math.ceil(q * len(sorted_values)) - 1, 0)
    return sorted_values[idx]


class TraceStore:
    """Bounded, hash-chained event store with a payload side-log."""

    def __init__(self, path: str | Path | None = None,
                 max_events: int = 200_000):
        self._lock = threading.Lock()
        self._events: list[TraceEvent] = []
        self._by_trace: dict[str, list[int]] = {}
        self._payloads = bytearray()
        self._chain = GENESIS
        self._max_events = max_events
        self.dropped = 0
        self._metrics: dict[str, list[tuple[float, float]]] = {}
        self._path = Path(path) if path else None
        self._events_file = None
        self._payload_file = None
        if self._path:
            self._path.mkdir(parents=True, exist_ok=True)
            self._load()
            self._events_file = open(self._path / "traces.jsonl", "a",
                                     encoding="utf-8")
            self._payload_file = open(self._path / "payloads.log", "ab")

    def _load(self) -> None:
        events_path = self._path / "traces.jsonl"
        payloads_path = self._path / "payloads.log"
        if payloads_path.exists():
            self._payloads = bytearray(payloads_path.read_bytes())
        if events_path.exists():
            with open(events_path, encoding="utf-8") as fh:
                for line in fh:
                    d = json.loads(line)
                    event = TraceEvent(**d)
                    self._events.append(event)
                    self._by_trace.setdefault(event.trace_id, []).append(
                        len(self._events) - 1)
                    self._chain = event.chain_digest or self._chain

    # ------------------------------------------------------------------
    # recording

    def record(self, *, trace_id: str, span_id: str | None = None,
               parent_span: str | None = None, component: str,
               operation: str, started_at: float, ended_at: float,
               input_payload, output_payload, versions: dict,
               attrs: dict | None = None) -> TraceEvent | None:
        """Append one span. Never raises toward the query path; on buffer
        overflow the event is dropped and counted."""
        span_id = span_id or new_id()
        input_blob = _canonical(input_payload)
        output_blob = _canonical(output_payload)
        with self._lock:
            if len(self._events) >= self._max_events:
                self.dropped += 1
                return None
            ref = len(self._payloads)
            payload_entry = _canonical({"input": input_payload,
                                        "output": output_payload})
            framed = len(payload_entry).to_bytes(8, "big") + payload_entry
            self._payloads.extend(framed)
            event = TraceEvent(
                trace_id=trace_id, span_id=span_id, parent_span=parent_span,
                component=component, operation=operation,
                started_at=started_at, ended_at=ended_at,
                input_digest=stable_digest(input_blob),
                output_digest=stable_digest(output_blob),
                payload_ref=ref, versions=dict(versions),
                attrs=dict(attrs or {}),
            )
            chained = stable_digest(
                (self._chain + event.input_digest + event.output_digest
                 + event.span_id).encode("utf-8"))
            event = TraceEvent(**{**event.to_dict(), "chain_digest": chained})
            self._chain = chained
            self._events.append(event)
            self._by_trace.setdefault(trace_id, []).append(len(self._events) - 1)
            if self._events_file:
                self._events_file.write(json.dumps(event.to_dict(),
                                                   sort_keys=True) + "\n")
                self._events_file.flush()
            if self._payload_file:
                self._payload_file.write(framed)
                self._payload_file.flush()
            return event

    def record_metric(self, name: str, value: float,
                      ts: float | None = None) -> None:
        with self._lock:
            self._metrics.setdefault(name, []).append(
                (ts if ts is not None else utcnow(), float(value)))

    # ------------------------------------------------------------------
    # reads

    def events(self, trace_id: str | None = None) -> list[TraceEvent]:
        with self._lock:
            if trace_id is None:
                return list(self._events)
            return [self._events[i] for i in self._by_trace.get(trace_id, [])]

    def payload(self, event: TraceEvent) -> dict:
        """Fetch and verify the payloads referenced by an event."""
        with self._lock:
            ref = event.payload_ref
            length = int.from_bytes(self._payloads[ref:ref + 8], "big")
            blob = bytes(self._payloads[ref + 8:ref + 8 + length])
        data = json.loads(blob)
        if stable_digest(_canonical(data["input"])) != event.input_digest:
            raise ValueError(f"payload digest mismatch for span {event.span_id}")
        if stable_digest(_canonical(data["output"])) != event.output_digest:
            raise ValueError(f"payload digest mismatch for span {event.span_id}")
        return data

    def trace(self, trace_id: str) -> TraceTree:
        """Span tree for one trace, ordered by start time; spans with an
        unknown parent are kept and flagged as orphans."""
        events = self.events(trace_id)
        if not events:
            raise NotFound(f"unknown trace: {trace_id!r}")
        events.sort(key=lambda e: (e.started_at, e.span_id))
        nodes = {e.span_id: SpanNode(e) for e in events}
        roots: list[SpanNode] = []
        for event in events:
            node = nodes[event.span_id]
            if event.parent_span and event.parent_span in nodes:
                nodes[event.parent_span].children.append(node)
            elif event.parent_span:
                node.orphan = True
                roots.append(node)
            else:
                roots.append(node)
        return TraceTree(trace_id, roots)

    def find_response(self, response_id: str) -> TraceEvent | None:
        with self._lock:
            for event in reversed(self._events):
                if event.attrs.get("response_id") == response_id:
                    return event
        return None

    def lineage(self, response_id: str, lake=None) -> LineageGraph:
        """Response -> chunks -> document versions, plus the byte-exact
        prompt reconstructed from the payload log."""
        anchor = self.find_response(response_id)
        if anchor is None:
            raise NotFound(f"unknown response: {response_id!r}")
        tree = self.trace(anchor.trace_id)
        all_spans = tree.spans()
        # The validation span carries the citation set; any span with the
        # response_id anchors the trace.
        cited = next((e for e in all_spans
                      if e.attrs.get("response_id") == response_id
                      and "citations" in e.attrs), anchor)
        spans = {e.operation: e for e in all_spans}
        prompt = ""
        if "build_prompt" in spans:
            prompt = self.payload(spans["build_prompt"])["output"]
        query = ""
        if "enhance_query" in spans:
            query = self.payload(spans["enhance_query"])["input"]
        output = self.payload(cited)["output"]
        answer = output.get("answer", "") if isinstance(output, dict) else ""
        chunk_ids = list(cited.attrs.get("citations", ()))
        rail_outcomes = []
        for event in tree.spans():
            rail_outcomes.extend(event.attrs.get("rail_outcomes", ()))
        from .retrieval import parse_chunk_id

        doc_versions = []
        for cid in chunk_ids:
            try:
                doc_key, version, _ = parse_chunk_id(cid)
            except ValueError:
                continue
            doc_versions.append((doc_key, version))
        graph = LineageGraph(
            response_id=response_id, trace_id=anchor.trace_id, query=query,
            prompt=prompt, answer=answer, chunk_ids=chunk_ids,
            doc_versions=sorted(set(doc_versions)),
            rail_outcomes=rail_outcomes,
            lake_seq=int(anchor.versions.get("lake_seq", 0)))
        if lake is not None:
            for doc_key, version in graph.doc_versions:
                lake.record(doc_key, version=version)  # raises NotFound if gone
        return graph

    def metrics_window(self, name: str, window: float,
                       now: float | None = None) -> WindowStats:
        """Exact stats over metric samples within the last ``window``
        seconds (no sketching at desk scale)."""
        with self._lock:
            if name not in self._metrics:
                raise NotFound(f"unknown metric: {name!r}")
            samples = self._metrics[name]
        now = now if now is not None else utcnow()
        values = sorted(v for ts, v in samples if now - window <= ts <= now)
        if not values:
            return WindowStats(0, None, None, None, None)
        return WindowStats(
            count=len(values),
            mean=math.fsum(values) / len(values),
            p50=percentile(values, 0.50),
            p95=percentile(values, 0.95),
            max=values[-1],
        )

    def metric_names(self) -> list[str]:
        with self._lock:
            return sorted(self._metrics)

    def verify_chain(self) -> bool:
        """Recompute the hash chain over all events."""
        chain = GENESIS
        with self._lock:
            for event in self._events:
                chain = stable_digest(
                    (chain + event.input_digest + event.output_digest
                     + event.span_id).encode("utf-8"))
                if chain != event.chain_digest:
                    return False
        return True

    def close(self) -> None:
        if self._events_file:
            self._events_file.close()
            self._events_file = None
        if self._payload_file:
            self._payload_file.close()
            self._payload_file = None
