"""Deployment configuration: sources, chunking, verification thresholds,
pipeline settings, rail chains, LLM client and persistence paths. Loaded
from YAML (or JSON), validated on load; the canonical-JSON digest of the
normalized config identifies a pipeline version.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coverage import DEFAULT_POPULATION_THRESHOLD, DEFAULT_TAU_SIM, AlertPolicy
from .errors import ConfigError
from .guardrails import RailEngine, RailSpec, default_rails
from .ingestion import SourceConfig
from .pipeline import HttpLLM, MockLLM, PipelineSettings, default_templates
from .retrieval import EMBEDDER_ID, ChunkPolicy
from .textutils import stable_digest
from .verification import VerificationPolicy

CONFIG_FORMAT = 1


@dataclass
class LLMSettings:
    client: str = "mock"  # mock | http
    endpoint_env: str = "RAGOPS_LLM_ENDPOINT"
    key_env: str = "RAGOPS_LLM_KEY"
    timeout: float = 30.0
    max_tokens: int = 256

    def build(self):
        if self.client == "mock":
            return MockLLM()
        if self.client == "http":
            endpoint = os.environ.get(self.endpoint_env, "")
            if not endpoint:
                raise ConfigError(
                    f"http client needs {self.endpoint_env} set")
            return HttpLLM(endpoint, os.environ.get(self.key_env, ""),
                           timeout=self.timeout)
        raise ConfigError(f"unknown llm client {self.client!r}")


@dataclass
class Thresholds:
    tau_sim: float = DEFAULT_TAU_SIM
    coverage: dict = field(default_factory=lambda: {
        "query": DEFAULT_POPULATION_THRESHOLD,
        "retrieval": DEFAULT_POPULATION_THRESHOLD,
        "generation": DEFAULT_POPULATION_THRESHOLD,
        "vocabulary": DEFAULT_POPULATION_THRESHOLD,
    })
    gate: dict = field(default_factory=lambda: {"recall@5": 0.8, "mrr": 0.6})
    gate_epsilon: float = 0.02
    metric_limits: dict = field(default_factory=dict)

    def alert_policy(self) -> AlertPolicy:
        return AlertPolicy(metric_limits={
            name: tuple(rule) for name, rule in self.metric_limits.items()})


@dataclass
class RolloutSettings:
    stage_window_queries: int = 1000
    stage_window_seconds: float = 3600.0


@dataclass
class DeploymentConfig:
    data_dir: str | None = None
    sources: list[SourceConfig] = field(default_factory=list)
    chunking: ChunkPolicy = field(default_factory=ChunkPolicy)
    embedder_id: str = EMBEDDER_ID
    verification: VerificationPolicy = field(default_factory=VerificationPolicy)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    rails: list[RailSpec] = field(default_factory=default_rails)
    llm: LLMSettings = field(default_factory=LLMSettings)
    thresholds: Thresholds = field(default_factory=Thresholds)
    rollout: RolloutSettings = field(default_factory=RolloutSettings)
    test_suite: str | None = None

    def __post_init__(self):
        if self.sources and not self.verification.trust_weights:
            from dataclasses import replace

            self.verification = replace(self.verification,
                                        trust_weights=self.trust_map())
        self.validate()

    def validate(self) -> None:
        seen = set()
        for source in self.sources:
            if source.source_id in seen:
                raise ConfigError(f"duplicate source_id {source.source_id!r}")
            seen.add(source.source_id)
        for name, value in [("tau_dup", self.verification.tau_dup),
                            ("tau_cons", self.verification.tau_cons),
                            ("delta_trust", self.verification.delta_trust),
                            ("tau_ground", self.pipeline.tau_ground),
                            ("tau_sim", self.thresholds.tau_sim)]:
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"threshold {name} must be in [0, 1]")
        for axis, value in self.thresholds.coverage.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"coverage threshold {axis} must be in [0, 1]")
        for name, value in self.thresholds.gate.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"gate threshold {name} must be in [0, 1]")
        if self.pipeline.template_id not in self.pipeline.templates:
            raise ConfigError(
                f"template {self.pipeline.template_id!r} is not defined")
        RailEngine(self.rails)  # validates duplicate ids / stage names

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "data_dir": self.data_dir,
            "sources": [{
                "source_id": s.source_id, "kind": s.kind,
                "location": s.location, "poll_interval": s.poll_interval,
                "trust_weight": s.trust_weight,
                "default_acl": list(s.default_acl),
                "json_map": s.json_map,
            } for s in self.sources],
            "chunking": {"target_size": self.chunking.target_size,
                         "overlap": self.chunking.overlap,
                         "boundary": self.chunking.boundary},
            "embedder_id": self.embedder_id,
            "verification": {
                "required_fields": list(self.verification.required_fields),
                "size_cap": self.verification.size_cap,
                "tau_dup": self.verification.tau_dup,
                "tau_cons": self.verification.tau_cons,
                "delta_trust": self.verification.delta_trust,
                "conflict_resolution": self.verification.conflict_resolution,
                "default_trust": self.verification.default_trust,
            },
            "pipeline": {
                "k_vector": self.pipeline.k_vector,
                "k_keyword": self.pipeline.k_keyword,
                "df_rare": self.pipeline.df_rare,
                "fusion_weights": self.pipeline.fusion_weights,
                "mmr_lambda": self.pipeline.mmr_lambda,
                "dedup_cosine": self.pipeline.dedup_cosine,
                "token_budget": self.pipeline.token_budget,
                "context_window": self.pipeline.context_window,
                "tau_ground": self.pipeline.tau_ground,
                "max_iters": self.pipeline.max_iters,
                "max_tokens": self.pipeline.max_tokens,
                "template_id": self.pipeline.template_id,
                "templates": self.pipeline.templates,
                "api_routes": [list(r) for r in self.pipeline.api_routes],
            },
            "rails": [{"rail_id": r.rail_id, "stage": r.stage, "kind": r.kind,
                       "order": r.order, "params": r.params}
                      for r in self.rails],
            "llm": {"client": self.llm.client,
                    "endpoint_env": self.llm.endpoint_env,
                    "key_env": self.llm.key_env, "timeout": self.llm.timeout,
                    "max_tokens": self.llm.max_tokens},
            "thresholds": {"tau_sim": self.thresholds.tau_sim,
                           "coverage": self.thresholds.coverage,
                           "gate": self.thresholds.gate,
                           "gate_epsilon": self.thresholds.gate_epsilon,
                           "metric_limits": {
                               k: list(v) for k, v in
                               self.thresholds.metric_limits.items()}},
            "rollout": {"stage_window_queries": self.rollout.stage_window_queries,
                        "stage_window_seconds": self.rollout.stage_window_seconds},
            "test_suite": self.test_suite,
        }

    def digest(self) -> str:
        """Content digest identifying a pipeline version; persistence
        paths do not change behavior, so they are excluded."""
        d = self.to_dict()
        d.pop("data_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return stable_digest(blob.encode("utf-8"))[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentConfig":
        sources = [SourceConfig(
            source_id=s["source_id"], kind=s["kind"],
            location=s.get("location", ""),
            poll_interval=float(s.get("poll_interval", 0.0)),
            trust_weight=float(s.get("trust_weight", 0.5)),
            default_acl=tuple(s.get("default_acl", ())),
            json_map=s.get("json_map"),
        ) for s in d.get("sources", [])]
        chunking_d = d.get("chunking", {})
        verification_d = d.get("verification", {})
        trust_weights = {s.source_id: s.trust_weight for s in sources}
        pipeline_d = d.get("pipeline", {})
        rails = [RailSpec(rail_id=r["rail_id"], stage=r["stage"],
                          kind=r["kind"], order=int(r.get("order", 0)),
                          params=r.get("params", {}))
                 for r in d["rails"]] if "rails" in d else default_rails()
        thresholds_d = d.get("thresholds", {})
        llm_d = d.get("llm", {})
        rollout_d = d.get("rollout", {})
        return cls(
            data_dir=d.get("data_dir"),
            sources=sources,
            chunking=ChunkPolicy(
                target_size=int(chunking_d.get("target_size", 200)),
                overlap=int(chunking_d.get("overlap", 40)),
                boundary=chunking_d.get("boundary", "sentence_aware")),
            embedder_id=d.get("embedder_id", EMBEDDER_ID),
            verification=VerificationPolicy(
                required_fields=tuple(verification_d.get(
                    "required_fields", ("timestamp", "source"))),
                size_cap=verification_d.get("size_cap"),
                tau_dup=float(verification_d.get("tau_dup", 0.95)),
                tau_cons=float(verification_d.get("tau_cons", 0.85)),
                delta_trust=float(verification_d.get("delta_trust", 0.2)),
                conflict_resolution=verification_d.get(
                    "conflict_resolution", "auto"),
                trust_weights=trust_weights,
                default_trust=float(verification_d.get("default_trust", 0.5))),
            pipeline=PipelineSettings(
                k_vector=int(pipeline_d.get("k_vector", 10)),
                k_keyword=int(pipeline_d.get("k_keyword", 10)),
                df_rare=int(pipeline_d.get("df_rare", 2)),
                fusion_weights=pipeline_d.get("fusion_weights", {
                    "vector": 0.7, "keyword": 0.3, "api": 0.5}),
                mmr_lambda=float(pipeline_d.get("mmr_lambda", 0.7)),
                dedup_cosine=float(pipeline_d.get("dedup_cosine", 0.9)),
                token_budget=int(pipeline_d.get("token_budget", 1024)),
                context_window=int(pipeline_d.get("context_window", 4096)),
                tau_ground=float(pipeline_d.get("tau_ground", 0.6)),
                max_iters=int(pipeline_d.get("max_iters", 2)),
                max_tokens=int(pipeline_d.get("max_tokens", 256)),
                template_id=pipeline_d.get("template_id", "default"),
                templates=pipeline_d.get("templates", default_templates()),
                api_routes=tuple(tuple(r) for r in
                                 pipeline_d.get("api_routes", ()))),
            rails=rails,
            llm=LLMSettings(
                client=llm_d.get("client", "mock"),
                endpoint_env=llm_d.get("endpoint_env", "RAGOPS_LLM_ENDPOINT"),
                key_env=llm_d.get("key_env", "RAGOPS_LLM_KEY"),
                timeout=float(llm_d.get("timeout", 30.0)),
                max_tokens=int(llm_d.get("max_tokens", 256))),
            thresholds=Thresholds(
                tau_sim=float(thresholds_d.get("tau_sim", DEFAULT_TAU_SIM)),
                coverage=thresholds_d.get("coverage", {
                    axis: DEFAULT_POPULATION_THRESHOLD
                    for axis in ("query", "retrieval", "generation",
                                 "vocabulary")}),
                gate=thresholds_d.get("gate", {"recall@5": 0.8, "mrr": 0.6}),
                gate_epsilon=float(thresholds_d.get("gate_epsilon", 0.02)),
                metric_limits=thresholds_d.get("metric_limits", {})),
            rollout=RolloutSettings(
                stage_window_queries=int(rollout_d.get(
                    "stage_window_queries", 1000)),
                stage_window_seconds=float(rollout_d.get(
                    "stage_window_seconds", 3600.0))),
            test_suite=d.get("test_suite"),
        )

    @classmethod
    def load(cls, path) -> "DeploymentConfig":
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def trust_map(self) -> dict[str, float]:
        return {s.source_id: s.trust_weight for s in self.sources}
