"""Guarded query processing: enhance, plan, retrieve, rerank, build the
prompt, generate, validate, with bounded reiteration when the draft is
not grounded. Every stage emits a trace span; rail chains run at the
four hand-off points (input before enhancement, dialog on the assembled
prompt, retrieval per hit, output on the final draft).

The built-in MockLLM is a deterministic extractive client so the whole
end-to-end suite runs with no network; real clients implement the same
single text-in/text-out call.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (ConfigError, EmptyGeneration, EmptyText,
                     GenerationUnavailable, RejectedInput,
                     RetrievalUnavailable)
from .guardrails import ABSTENTION, RailEngine
from .metrics import faithfulness
from .observability import TraceStore, new_id
from .retrieval import EMBEDDER_ID, Embedding, SearchIndex, embed
from .textutils import STOPWORDS, split_sentences, tokenize, utcnow

WITHHELD_PREFIX = "Response withheld by output rail: "


@dataclass
class EnhancedQuery:
    original: str
    enhanced: str
    embedder_id: str
    query_embedding: Embedding
    terms: list[str]


@dataclass(frozen=True)
class Route:
    source: str  # vector | keyword | api:<id>
    method: str
    k: int


@dataclass
class RetrievalPlan:
    routes: list[Route]
    rationale: str


@dataclass
class RetrievedItem:
    ref: str
    text: str
    score: float
    source: str
    acl: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()


@dataclass
class RetrievedSet:
    items: list[RetrievedItem]
    degraded_routes: list[str] = field(default_factory=list)
    rail_outcomes: list[dict] = field(default_factory=list)

    def refs(self) -> set[str]:
        return {item.ref for item in self.items}


@dataclass
class ContextItem:
    ref: str
    text: str
    score: float
    source: str


@dataclass
class RankedContext:
    items: list[ContextItem]
    token_budget: int

    def texts(self) -> list[str]:
        return [item.text for item in self.items]


@dataclass
class Draft:
    text: str


@dataclass
class FinalResponse:
    response_id: str
    answer: str
    citations: list[str]
    validation: dict
    iterations: int
    trace_id: str

    def to_dict(self) -> dict:
        return {
            "response_id": self.response_id, "answer": self.answer,
            "citations": self.citations, "validation": self.validation,
            "iterations": self.iterations, "trace_id": self.trace_id,
        }


def default_templates() -> dict:
    return {
        "default": {
            "context": ("You are a retrieval-grounded assistant. Answer "
                        "strictly from the numbered context items and cite "
                        "them.\n\nContext:\n{context}\n\nQuestion: "
                        "{question}\nAnswer:"),
            "no_context": ("You are a retrieval-grounded assistant. No "
                           "context is available; say so briefly.\n\n"
                           "Question: {question}\nAnswer:"),
        }
    }


@dataclass
class PipelineSettings:
    k_vector: int = 10
    k_keyword: int = 10
    df_rare: int = 2
    fusion_weights: dict = field(default_factory=lambda: {
        "vector": 0.7, "keyword": 0.3, "api": 0.5})
    mmr_lambda: float = 0.7
    dedup_cosine: float = 0.9
    token_budget: int = 1024
    context_window: int = 4096
    tau_ground: float = 0.6
    max_iters: int = 2
    max_tokens: int = 256
    template_id: str = "default"
    templates: dict = field(default_factory=default_templates)
    api_routes: tuple = ()  # (regex pattern, api id, k) triples
    llm_id: str = "mock"


_CONTEXT_LINE_RE = re.compile(r"^\[(\d+)\] \(([^)]*)\) (.*)$", re.MULTILINE)
_QUESTION_RE = re.compile(r"^Question: (.*)$", re.MULTILINE)
_CITE_RE = re.compile(r"\[([^\[\]]+)\]")


class MockLLM:
    """Deterministic extractive generator.

    Parses the numbered context back out of the prompt (the honest
    text-in/text-out contract) and answers with up to three context
    sentences with the highest term overlap with the question, each
    followed by its [ref] citation.
    """

    llm_id = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed  # accepted for interface parity; output is pure

    def complete(self, prompt: str, max_tokens: int = 256) -> str:
        items = _CONTEXT_LINE_RE.findall(prompt)
        question_m = _QUESTION_RE.search(prompt)
        question = question_m.group(1) if question_m else ""
        if not items:
            return ABSTENTION
        q_terms = {t for t in tokenize(question) if t not in STOPWORDS}
        if not q_terms:
            q_terms = set(tokenize(question))
        scored = []
        for item_idx, (_, ref, text) in enumerate(items):
            for sent_idx, sentence in enumerate(split_sentences(text)):
                overlap = len(q_terms & set(tokenize(sentence)))
                if overlap > 0:
                    scored.append((-overlap, item_idx, sent_idx, sentence, ref))
        if not scored:
            return ABSTENTION
        scored.sort()
        parts = [f"{sentence} [{ref}]" for _, _, _, sentence, ref in scored[:3]]
        return " ".join(parts)


class PlantedHallucinationLLM:
    """Adversarial test double: ignores the context entirely."""

    llm_id = "hallucinating-mock"

    def complete(self, prompt: str, max_tokens: int = 256) -> str:
        return ("Zanzibar quux flibbertigibbet mahogany vortex. "
                "Snorkelwump fabricated irrelevancies galore.")


class HttpLLM:
    """Minimal HTTP client: POST {prompt, max_tokens} -> {text}."""

    def __init__(self, endpoint: str, api_key: str = "",
                 timeout: float = 30.0, llm_id: str = "http"):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.llm_id = llm_id

    def complete(self, prompt: str, max_tokens: int = 256) -> str:
        import httpx

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(self.endpoint,
                              json={"prompt": prompt, "max_tokens": max_tokens},
                              headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["text"]
        except Exception as exc:
            raise GenerationUnavailable(str(exc)) from exc


class QueryPipeline:
    """One pipeline version: pins its settings, index and rail chains."""

    def __init__(self, index: SearchIndex, lake, rails: RailEngine,
                 settings: PipelineSettings | None = None,
                 client=None, tracer: TraceStore | None = None,
                 api_clients: dict | None = None,
                 version_id: str = "v0"):
        self.index = index
        self.lake = lake
        self.rails = rails
        self.settings = settings or PipelineSettings()
        self.client = client or MockLLM()
        self.tracer = tracer or TraceStore()
        self.api_clients = api_clients or {}
        self.version_id = version_id
        self._vector_cache: dict[str, np.ndarray] = {}

    # ------------------------------------------------------------------
    # stage implementations

    def enhance_query(self, q: str) -> EnhancedQuery:
        """Default enhancer: identity text plus a stopword-stripped term
        list; the embedding always comes from the enhanced text."""
        try:
            embedding = embed(q)
        except EmptyText as exc:
            raise RejectedInput(f"query has no tokens: {q!r}") from exc
        terms = [t for t in tokenize(q) if t not in STOPWORDS]
        return EnhancedQuery(original=q, enhanced=q,
                             embedder_id=embedding.embedder_id,
                             query_embedding=embedding, terms=terms)

    def plan(self, eq: EnhancedQuery) -> RetrievalPlan:
        """Rule-based routing: vector always; keyword when a term is rare
        in the index; api routes on configured query patterns."""
        s = self.settings
        routes = [Route("vector", "cosine_topk", s.k_vector)]
        fired = ["always: vector"]
        rare = [t for t in eq.terms
                if self.index.document_frequency(t) < s.df_rare]
        if rare:
            routes.append(Route("keyword", "bm25", s.k_keyword))
            fired.append(f"rare terms {sorted(rare)[:5]}: keyword")
        for pattern, api_id, k in s.api_routes:
            if re.search(pattern, eq.original):
                routes.append(Route(f"api:{api_id}", "http", int(k)))
                fired.append(f"pattern {pattern!r}: api:{api_id}")
        return RetrievalPlan(routes=routes, rationale="; ".join(fired))

    def retrieve(self, plan: RetrievalPlan, eq: EnhancedQuery,
                 role: str | None = None, k_scale: int = 1) -> RetrievedSet:
        """Execute all routes; failed routes degrade rather than abort,
        and every hit passes the retrieval rail chain before inclusion."""
        items: list[RetrievedItem] = []
        degraded: list[str] = []
        rail_outcomes: list[dict] = []
        succeeded = 0
        for route in plan.routes:
            k = max(route.k * k_scale, 1)
            try:
                if route.source == "vector":
                    hits = self.index.search_vector(eq.query_embedding, k, role)
                    raw = [(h.chunk_id, h.score, None) for h in hits]
                elif route.source == "keyword":
                    hits = self.index.search_keyword(eq.terms, k, role)
                    raw = [(h.chunk_id, h.score, None) for h in hits]
                elif route.source.startswith("api:"):
                    api_id = route.source.split(":", 1)[1]
                    client = self.api_clients.get(api_id)
                    if client is None:
                        raise ConfigError(f"api client {api_id!r} not configured")
                    raw = [(d["ref"], float(d.get("score", 0.0)),
                            str(d.get("text", "")))
                           for d in client(eq.enhanced, k)]
                else:
                    raise ConfigError(f"unknown route source {route.source!r}")
                succeeded += 1
            except ConfigError:
                raise
            except Exception as exc:
                degraded.append(f"{route.source}: {exc}")
                continue
            for ref, score, api_text in raw:
                chunk = self.index.get_chunk(ref)
                if chunk is not None:
                    item = RetrievedItem(ref=ref, text=chunk.text, score=score,
                                         source=route.source, acl=chunk.acl,
                                         flags=self.index.flags_of(ref))
                else:
                    item = RetrievedItem(ref=ref, text=api_text or "",
                                         score=score, source=route.source)
                outcome = self.rails.apply("retrieval", item, {"role": role})
                rail_outcomes.extend(o.to_dict() for o in outcome.outcomes)
                if outcome.rejected:
                    continue
                if isinstance(outcome.payload, str):
                    item.text = outcome.payload
                items.append(item)
        if not succeeded:
            raise RetrievalUnavailable("; ".join(degraded) or "no routes")
        return RetrievedSet(items=items, degraded_routes=degraded,
                            rail_outcomes=rail_outcomes)

    def _vector_of(self, text: str) -> np.ndarray | None:
        if text not in self._vector_cache:
            try:
                self._vector_cache[text] = embed(text).vector
            except EmptyText:
                self._vector_cache[text] = None
        return self._vector_cache[text]

    def rerank(self, rs: RetrievedSet, eq: EnhancedQuery,
               budget: int | None = None) -> RankedContext:
        """Weighted score fusion plus greedy MMR-style selection.

        Per-source scores are max-normalized and combined with the
        configured weights. Selection walks candidates by the MMR
        objective (lambda * fused - (1 - lambda) * max similarity to the
        selected set), rejecting anything with cosine >= the dedup
        threshold to a selected item and skipping items that do not fit
        the token budget. The surviving items are presented in fused
        score order, so scores are non-increasing.
        """
        s = self.settings
        budget = budget if budget is not None else s.token_budget
        if not rs.items:
            return RankedContext(items=[], token_budget=budget)
        per_source_max: dict[str, float] = {}
        for item in rs.items:
            per_source_max[item.source] = max(
                per_source_max.get(item.source, 0.0), item.score)
        fused: dict[str, float] = {}
        text_of: dict[str, str] = {}
        source_of: dict[str, str] = {}
        for item in rs.items:
            top = per_source_max[item.source]
            norm = max(item.score, 0.0) / top if top > 0 else 0.0
            weight = s.fusion_weights.get(item.source.split(":")[0], 0.5)
            fused[item.ref] = fused.get(item.ref, 0.0) + weight * norm
            text_of.setdefault(item.ref, item.text)
            source_of.setdefault(item.ref, item.source)
        remaining = sorted(fused, key=lambda ref: (-fused[ref], ref))
        selected: list[str] = []
        used_tokens = 0
        while remaining:
            best_ref, best_obj = None, None
            rejected: list[str] = []
            for ref in remaining:
                vec = self._vector_of(text_of[ref])
                max_sim = 0.0
                if vec is not None and selected:
                    sims = [float(np.dot(vec, sv)) for sv in
                            (self._vector_of(text_of[r]) for r in selected)
                            if sv is not None]
                    max_sim = max(sims, default=0.0)
                if selected and max_sim >= s.dedup_cosine:
                    rejected.append(ref)
                    continue
                obj = s.mmr_lambda * fused[ref] - (1 - s.mmr_lambda) * max_sim
                if best_obj is None or obj > best_obj:
                    best_ref, best_obj = ref, obj
            for ref in rejected:
                remaining.remove(ref)
            if best_ref is None:
                break
            remaining.remove(best_ref)
            cost = len(tokenize(text_of[best_ref]))
            if used_tokens + cost > budget:
                continue
            used_tokens += cost
            selected.append(best_ref)
        ordered = sorted(selected, key=lambda ref: (-fused[ref], ref))
        items = [ContextItem(ref=ref, text=text_of[ref], score=fused[ref],
                             source=source_of[ref]) for ref in ordered]
        return RankedContext(items=items, token_budget=budget)

    def build_prompt(self, eq: EnhancedQuery, ctx: RankedContext,
                     template_id: str | None = None) -> str:
        """Deterministic template fill; dialog rails run on the result.

        Context items render one per line as "[i] (ref) text" with inner
        whitespace flattened, so prompts parse unambiguously.
        """
        template_id = template_id or self.settings.template_id
        templates = self.settings.templates.get(template_id)
        if templates is None:
            raise ConfigError(f"unknown template: {template_id!r}")
        if ctx.items:
            lines = []
            for i, item in enumerate(ctx.items, start=1):
                flat = " ".join(item.text.split())
                lines.append(f"[{i}] ({item.ref}) {flat}")
            prompt = templates["context"].format(context="\n".join(lines),
                                                 question=eq.original)
        else:
            prompt = templates["no_context"].format(question=eq.original)
        # Defensive window budget: drop trailing items until the rendered
        # prompt fits the context window.
        if len(tokenize(prompt)) > self.settings.context_window and ctx.items:
            ctx.items.pop()
            return self.build_prompt(eq, ctx, template_id)
        outcome = self.rails.apply("dialog", prompt)
        if outcome.rejected:
            raise RejectedInput(f"dialog rail rejected prompt: {outcome.reason}")
        self._last_dialog_outcomes = [o.to_dict() for o in outcome.outcomes]
        return outcome.payload

    def generate(self, prompt: str, client=None) -> Draft:
        """Single text-in/text-out call to the configured client."""
        client = client or self.client
        try:
            text = client.complete(prompt, self.settings.max_tokens)
        except (GenerationUnavailable, EmptyGeneration):
            raise
        except Exception as exc:
            raise GenerationUnavailable(str(exc)) from exc
        if not text or not text.strip():
            raise EmptyGeneration("client returned an empty completion")
        return Draft(text=text)

    def validate_response(self, draft: Draft, ctx: RankedContext,
                          eq: EnhancedQuery) -> dict:
        """Faithfulness-based grounding plus query relevance."""
        score = faithfulness(draft.text, ctx.texts())
        vec = self._vector_of(draft.text)
        relevance = 0.0
        if vec is not None:
            relevance = float(np.dot(vec, eq.query_embedding.vector))
        return {"faithfulness": score,
                "grounded": score >= self.settings.tau_ground,
                "relevance": relevance}

    # ------------------------------------------------------------------
    # orchestration

    def _versions_tuple(self) -> dict:
        return {
            "pipeline_version": self.version_id,
            "index_epoch": self.index.epoch.epoch,
            "lake_seq": self.lake.lake_seq if self.lake else 0,
            "embedder_id": EMBEDDER_ID,
            "llm_id": getattr(self.client, "llm_id", "custom"),
        }

    def answer(self, q: str, role: str | None = None,
               client=None, query_id: str | None = None,
               trace_attrs: dict | None = None) -> FinalResponse:
        """End-to-end composition with bounded reiteration: when the draft
        is not grounded and iterations remain, retrieval re-runs with k
        doubled. Ungrounded final drafts are returned flagged, never
        silently dropped."""
        client = client or self.client
        trace_id = new_id()
        versions = self._versions_tuple()
        start = utcnow()

        def span(operation, input_payload, output_payload, t0, attrs=None):
            t1 = utcnow()
            self.tracer.record(
                trace_id=trace_id, parent_span=root_span, component="pipeline",
                operation=operation, started_at=t0, ended_at=t1,
                input_payload=input_payload, output_payload=output_payload,
                versions=versions, attrs=attrs or {})
            self.tracer.record_metric(f"latency.{operation}",
                                      (t1 - t0) * 1000.0)

        root_span = new_id()

        t0 = utcnow()
        input_outcome = self.rails.apply("input", q)
        if input_outcome.rejected:
            span("input_rails", q, None, t0,
                 {"rail_outcomes": [o.to_dict() for o in input_outcome.outcomes]})
            raise RejectedInput(f"input rail rejected query: "
                                f"{input_outcome.reason}",
                                reason=input_outcome.reason)
        clean_q = input_outcome.payload
        span("input_rails", q, clean_q, t0,
             {"rail_outcomes": [o.to_dict() for o in input_outcome.outcomes]})

        t0 = utcnow()
        eq = self.enhance_query(clean_q)
        span("enhance_query", clean_q,
             {"enhanced": eq.enhanced, "terms": eq.terms}, t0)

        t0 = utcnow()
        plan = self.plan(eq)
        span("plan", eq.enhanced,
             {"routes": [[r.source, r.method, r.k] for r in plan.routes],
              "rationale": plan.rationale}, t0)

        iterations = 1
        k_scale = 1
        while True:
            t0 = utcnow()
            rs = self.retrieve(plan, eq, role, k_scale)
            span("retrieve", {"k_scale": k_scale},
                 {"refs": sorted(rs.refs()), "degraded": rs.degraded_routes},
                 t0, {"rail_outcomes": rs.rail_outcomes,
                      "degraded": rs.degraded_routes})

            t0 = utcnow()
            ctx = self.rerank(rs, eq)
            span("rerank", sorted(rs.refs()),
                 [[i.ref, i.score] for i in ctx.items], t0)

            t0 = utcnow()
            self._last_dialog_outcomes = []
            prompt = self.build_prompt(eq, ctx)
            span("build_prompt",
                 {"question": eq.original, "refs": [i.ref for i in ctx.items]},
                 prompt, t0, {"rail_outcomes": self._last_dialog_outcomes})

            t0 = utcnow()
            draft = self.generate(prompt, client)
            span("generate", prompt, draft.text, t0)

            t0 = utcnow()
            validation = self.validate_response(draft, ctx, eq)
            if validation["grounded"] or iterations >= self.settings.max_iters:
                break
            span("validate_response", draft.text,
                 {"verdict": "reiterate", **validation}, t0)
            iterations += 1
            k_scale *= 2

        t0 = utcnow()
        output_outcome = self.rails.apply(
            "output", draft.text, {"context_texts": ctx.texts()})
        if output_outcome.rejected:
            final_answer = WITHHELD_PREFIX + output_outcome.reason
            withheld = True
        else:
            final_answer = output_outcome.payload
            withheld = False
        citations = [ref for ref in _CITE_RE.findall(final_answer)
                     if ref in rs.refs()]
        citations = sorted(set(citations))
        response_id = new_id()
        attrs = {
            "response_id": response_id,
            "citations": citations,
            "retained_refs": [i.ref for i in ctx.items],
            "retrieved_refs": sorted(rs.refs()),
            "withheld": withheld,
            "faithfulness": validation["faithfulness"],
            "rail_outcomes": [o.to_dict() for o in output_outcome.outcomes],
            **(trace_attrs or {}),
        }
        if query_id is not None:
            attrs["query_id"] = query_id
        span("validate_response", draft.text,
             {"answer": final_answer, "validation": validation}, t0, attrs)

        total_ms = (utcnow() - start) * 1000.0
        self.tracer.record(
            trace_id=trace_id, span_id=root_span, parent_span=None,
            component="pipeline", operation="answer", started_at=start,
            ended_at=utcnow(), input_payload=q,
            output_payload={"answer": final_answer},
            versions=versions,
            attrs={"response_id": response_id, "query_id": query_id,
                   "latency_ms": total_ms, **({} if trace_attrs is None
                                              else trace_attrs)})
        self.tracer.record_metric("latency.answer", total_ms)

        return FinalResponse(
            response_id=response_id, answer=final_answer,
            citations=citations,
            validation={"grounded": validation["grounded"] and not withheld,
                        "relevance": validation["relevance"],
                        "faithfulness": validation["faithfulness"]},
            iterations=iterations, trace_id=trace_id)
