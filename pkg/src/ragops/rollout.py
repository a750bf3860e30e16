"""Live-testing deployment strategies: shadow, A/B and staged rollout.

Pipeline versions move through a strict state machine (draft ->
offline_passed -> live_candidate -> live -> retired, with recalled
reachable only from live_candidate/live); only offline-passed versions
may enter a live strategy, and a recalled version must pass a fresh
offline gate before re-entering. Query assignment hashes the query id,
so routing is deterministic and user-safe: shadow traffic is always
served from control.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field, replace

from .errors import Blocked, ConfigError, EmptyWindow, InvalidTransition, NotActive, NotFound
from .textutils import utcnow

DRAFT = "draft"
OFFLINE_PASSED = "offline_passed"
LIVE_CANDIDATE = "live_candidate"
LIVE = "live"
RETIRED = "retired"
RECALLED = "recalled"

VERSION_STATES = (DRAFT, OFFLINE_PASSED, LIVE_CANDIDATE, LIVE, RETIRED, RECALLED)

ALLOWED_TRANSITIONS = {
    DRAFT: {OFFLINE_PASSED},
    OFFLINE_PASSED: {LIVE_CANDIDATE, LIVE},
    LIVE_CANDIDATE: {LIVE, RECALLED},
    LIVE: {RETIRED, RECALLED},
    RETIRED: set(),
    RECALLED: {OFFLINE_PASSED},
}
# OFFLINE_PASSED -> LIVE directly is only for bootstrapping the first
# live version; candidates promoted by a deployment go through
# LIVE_CANDIDATE.

SHADOW = "shadow"
AB = "ab"
STAGED = "staged"

ACTIVE = "active"
COMPLETED = "completed"
RECALLED_DEPLOYMENT = "recalled"


@dataclass
class PipelineVersion:
    version_id: str
    config_digest: str
    state: str = DRAFT


@dataclass
class Deployment:
    deployment_id: str
    strategy: str
    control: str
    candidate: str
    ab_pct: int = 0
    stage_schedule: tuple[tuple[int, int], ...] = ()
    stage_index: int = 0
    status: str = ACTIVE

    @property
    def current_pct(self) -> int:
        if self.strategy == SHADOW:
            return 0
        if self.strategy == AB:
            return self.ab_pct
        if not self.stage_schedule:
            return 0
        return self.stage_schedule[min(self.stage_index,
                                       len(self.stage_schedule) - 1)][1]

    def to_dict(self) -> dict:
        return {"deployment_id": self.deployment_id, "strategy": self.strategy,
                "control": self.control, "candidate": self.candidate,
                "ab_pct": self.ab_pct,
                "stage_schedule": [list(s) for s in self.stage_schedule],
                "stage_index": self.stage_index, "status": self.status,
                "current_pct": self.current_pct}


@dataclass(frozen=True)
class Assignment:
    serve: str
    also_run: str | None = None


@dataclass
class FeedbackRecord:
    deployment_id: str
    candidate: str
    reason: str
    alert_ids: tuple[str, ...]
    created_at: float


def routing_hash(query_id: str) -> int:
    """Stable 64-bit hash for traffic assignment (never Python's hash())."""
    return int.from_bytes(
        hashlib.sha256(query_id.encode("utf-8")).digest()[:8], "big")


def route(query_id: str, deployment: Deployment) -> Assignment:
    """Deterministic per-query assignment.

    Shadow serves control and also runs the candidate; A/B and staged
    serve the candidate for hash64(query_id) mod 100 < pct.
    """
    if deployment.status != ACTIVE:
        raise NotActive(f"deployment {deployment.deployment_id} is "
                        f"{deployment.status}")
    if deployment.strategy == SHADOW:
        return Assignment(serve=deployment.control,
                          also_run=deployment.candidate)
    pct = deployment.current_pct
    if routing_hash(query_id) % 100 < pct:
        return Assignment(serve=deployment.candidate)
    return Assignment(serve=deployment.control)


class VersionRegistry:
    """Pipeline versions and their state machine."""

    def __init__(self):
        self._versions: dict[str, PipelineVersion] = {}
        self._lock = threading.RLock()

    def register(self, version_id: str, config_digest: str,
                 state: str = DRAFT) -> PipelineVersion:
        with self._lock:
            if state not in VERSION_STATES:
                raise ConfigError(f"unknown state {state!r}")
            version = PipelineVersion(version_id, config_digest, state)
            self._versions[version_id] = version
            return version

    def get(self, version_id: str) -> PipelineVersion:
        if version_id not in self._versions:
            raise NotFound(f"unknown pipeline version: {version_id!r}")
        return self._versions[version_id]

    def all_versions(self) -> list[PipelineVersion]:
        return list(self._versions.values())

    def live_version(self) -> PipelineVersion | None:
        for version in self._versions.values():
            if version.state == LIVE:
                return version
        return None

    def transition(self, version_id: str, new_state: str) -> PipelineVersion:
        with self._lock:
            version = self.get(version_id)
            if new_state not in ALLOWED_TRANSITIONS.get(version.state, set()):
                raise InvalidTransition(
                    f"{version_id}: {version.state} -> {new_state} not allowed")
            if new_state == LIVE:
                current = self.live_version()
                if current is not None and current.version_id != version_id:
                    raise InvalidTransition(
                        f"{current.version_id} is already live; retire it first")
            version.state = new_state
            return version

    def mark_offline_passed(self, version_id: str, verdict) -> PipelineVersion:
        """Gate verdicts are the only path into offline_passed."""
        if not getattr(verdict, "passed", False):
            raise InvalidTransition(
                f"{version_id}: offline gate did not pass")
        return self.transition(version_id, OFFLINE_PASSED)


class RolloutManager:
    """Deployments, promotion and the recall feedback loop."""

    def __init__(self, registry: VersionRegistry):
        self.registry = registry
        self._deployments: dict[str, Deployment] = {}
        self._feedback: list[FeedbackRecord] = []
        self._lock = threading.RLock()
        self._counter = 0

    def _new_id(self) -> str:
        self._counter += 1
        return f"dep-{self._counter}"

    def deployments(self) -> list[Deployment]:
        return list(self._deployments.values())

    def get(self, deployment_id: str) -> Deployment:
        if deployment_id not in self._deployments:
            raise NotFound(f"unknown deployment: {deployment_id!r}")
        return self._deployments[deployment_id]

    def active_deployment(self) -> Deployment | None:
        for dep in self._deployments.values():
            if dep.status == ACTIVE:
                return dep
        return None

    def start(self, strategy: str, candidate: str, control: str | None = None,
              ab_pct: int = 0,
              stage_schedule: tuple[tuple[int, int], ...] = ()) -> Deployment:
        """Enter a live strategy; the candidate must be offline-passed."""
        with self._lock:
            if strategy not in (SHADOW, AB, STAGED):
                raise ConfigError(f"unknown strategy {strategy!r}")
            cand = self.registry.get(candidate)
            if cand.state != OFFLINE_PASSED:
                raise InvalidTransition(
                    f"candidate {candidate} is {cand.state}; needs a fresh "
                    f"offline_passed verdict")
            live = self.registry.live_version()
            if control is None:
                if live is None:
                    raise ConfigError("no live control version")
                control = live.version_id
            if control == candidate:
                raise ConfigError("control and candidate must differ")
            if self.active_deployment() is not None:
                raise ConfigError("another deployment is active")
            if strategy == AB and not 0 <= ab_pct <= 100:
                raise ConfigError("ab_pct must be in 0..100")
            if strategy == STAGED:
                pcts = [pct for _, pct in stage_schedule]
                if not stage_schedule or pcts != sorted(pcts):
                    raise ConfigError(
                        "staged rollout needs a non-decreasing schedule")
            self.registry.transition(candidate, LIVE_CANDIDATE)
            dep = Deployment(self._new_id(), strategy, control, candidate,
                             ab_pct=ab_pct,
                             stage_schedule=tuple(tuple(s) for s in stage_schedule))
            self._deployments[dep.deployment_id] = dep
            return dep

    def route(self, query_id: str) -> Assignment:
        dep = self.active_deployment()
        if dep is None:
            live = self.registry.live_version()
            if live is None:
                raise NotActive("no live version and no active deployment")
            return Assignment(serve=live.version_id)
        return route(query_id, dep)

    def advance(self, deployment_id: str,
                open_breaches: list | None = None) -> Deployment:
        """Move a staged deployment to its next exposure step; the final
        step promotes the candidate to live and retires the control."""
        with self._lock:
            dep = self.get(deployment_id)
            if dep.status != ACTIVE:
                return dep  # advancing a finished deployment is a no-op
            if dep.strategy != STAGED:
                raise ConfigError("advance applies to staged deployments")
            if open_breaches:
                raise Blocked(
                    f"{len(open_breaches)} open breach alert(s); resolve or "
                    f"recall first")
            if dep.stage_index + 1 < len(dep.stage_schedule):
                dep.stage_index += 1
                return dep
            # final stage: retire the control, then promote the candidate
            if self.registry.get(dep.control).state == LIVE:
                self.registry.transition(dep.control, RETIRED)
            self.registry.transition(dep.candidate, LIVE)
            dep.status = COMPLETED
            return dep

    def recall(self, deployment_id: str, reason: str,
               alert_ids: tuple[str, ...] = ()) -> Deployment:
        """Pull the candidate: all traffic returns to control and the
        candidate may only re-enter after a new offline gate pass."""
        with self._lock:
            dep = self.get(deployment_id)
            self.registry.transition(dep.candidate, RECALLED)
            dep.status = RECALLED_DEPLOYMENT
            self._feedback.append(FeedbackRecord(
                deployment_id=deployment_id, candidate=dep.candidate,
                reason=reason, alert_ids=tuple(alert_ids),
                created_at=utcnow()))
            return dep

    def feedback_records(self) -> list[FeedbackRecord]:
        return list(self._feedback)


@dataclass
class ComparisonReport:
    n_pairs: int
    candidate_failures: int
    deltas: dict[str, float]
    top_divergent: list[dict]

    def to_dict(self) -> dict:
        return {"n_pairs": self.n_pairs,
                "candidate_failures": self.candidate_failures,
                "deltas": self.deltas, "top_divergent": self.top_divergent}


def compare_shadow(trace_store, control: str, candidate: str,
                   lake_docs_of=None) -> ComparisonReport:
    """Pair control/candidate answer spans by query_id and report deltas
    in faithfulness, latency and retrieval overlap (Jaccard of retrieved
    chunk sets). Unpaired control runs count as candidate failures."""
    runs: dict[str, dict[str, dict]] = {}
    for event in trace_store.events():
        if event.operation != "validate_response":
            continue
        query_id = event.attrs.get("query_id")
        if query_id is None:
            continue
        version = event.versions.get("pipeline_version")
        if version not in (control, candidate):
            continue
        runs.setdefault(query_id, {})[version] = {
            "faithfulness": float(event.attrs.get("faithfulness", 0.0)),
            "latency": event.ended_at - event.started_at,
            "refs": set(event.attrs.get("retrieved_refs", ())),
        }
    pairs = []
    failures = 0
    for query_id, sides in runs.items():
        if control in sides and candidate in sides:
            pairs.append((query_id, sides[control], sides[candidate]))
        elif control in sides:
            failures += 1
    if not pairs and not failures:
        raise EmptyWindow("no paired shadow traces")

    def overlap(a: set, b: set) -> float:
        if not a and not b:
            return 1.0
        return len(a & b) / len(a | b)

    deltas = {
        "faithfulness_delta_mean": _mean(
            c2["faithfulness"] - c1["faithfulness"] for _, c1, c2 in pairs),
        "latency_delta_mean": _mean(
            c2["latency"] - c1["latency"] for _, c1, c2 in pairs),
        "retrieval_overlap_mean": _mean(
            overlap(c1["refs"], c2["refs"]) for _, c1, c2 in pairs),
    }
    divergent = sorted(
        ({"query_id": qid,
          "faithfulness_delta": c2["faithfulness"] - c1["faithfulness"],
          "retrieval_overlap": overlap(c1["refs"], c2["refs"])}
         for qid, c1, c2 in pairs),
        key=lambda d: (d["retrieval_overlap"], d["faithfulness_delta"]))
    return ComparisonReport(
        n_pairs=len(pairs), candidate_failures=failures, deltas=deltas,
        top_divergent=divergent[:10])


def _mean(values) -> float:
    values = list(values)
    if not values:
        return 0.0
    return math.fsum(values) / len(values)
