"""Composable rail chains at the four pipeline stages: input, dialog,
retrieval, output. Each rail allows, modifies, or rejects its payload;
rejection is a value, not an exception, and short-circuits the chain.
Rails are pure functions of (payload, params, context)."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .errors import ConfigError
from .metrics import faithfulness

logger = logging.getLogger(__name__)

STAGES = ("input", "dialog", "retrieval", "output")

ALLOW = "allow"
MODIFY = "modify"
REJECT = "reject"

# The pipeline's fixed safe-state answer when no context supports a reply.
ABSTENTION = "No supporting context found."

_EMAIL_RE = re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}")
_LONG_NUMBER_RE = re.compile(r"\d{8,}")


@dataclass(frozen=True)
class RailSpec:
    rail_id: str
    stage: str
    kind: str
    order: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown rail stage: {self.stage!r}")


@dataclass(frozen=True)
class RailOutcome:
    decision: str
    rail_id: str = ""
    payload_out: object = None
    reason: str = ""

    def to_dict(self) -> dict:
        return {"decision": self.decision, "rail_id": self.rail_id,
                "reason": self.reason}


@dataclass
class ChainOutcome:
    stage: str
    rejected: bool
    payload: object
    reason: str
    outcomes: list[RailOutcome]


def rail_pii_mask(text: str) -> RailOutcome:
    """Mask email addresses and digit runs of 8+ into fixed placeholders."""
    masked = _EMAIL_RE.sub("[EMAIL]", text)
    masked = _LONG_NUMBER_RE.sub("[NUMBER]", masked)
    if masked == text:
        return RailOutcome(ALLOW, payload_out=text)
    return RailOutcome(MODIFY, payload_out=masked, reason="pii masked")


def rail_blocklist(text: str, terms: list[str]) -> RailOutcome:
    """Reject on case-insensitive word-boundary blocklist matches."""
    for term in terms:
        if re.search(rf"\b{re.escape(term)}\b", text, re.IGNORECASE):
            return RailOutcome(REJECT, reason=f"blocked term: {term}")
    return RailOutcome(ALLOW, payload_out=text)


def rail_retrieval_filter(hit, role: str | None = None) -> RailOutcome:
    """Reject poisoned/quarantined or ACL-restricted hits; mask sensitive
    spans otherwise. ``hit`` needs text, acl and flags attributes."""
    flags = set(getattr(hit, "flags", ()) or ())
    if flags & {"poison", "poisoned", "quarantine", "quarantined"}:
        return RailOutcome(REJECT, reason=f"flagged: {sorted(flags)[0]}")
    acl = tuple(getattr(hit, "acl", ()) or ())
    if acl and role not in acl:
        return RailOutcome(REJECT, reason="acl excludes role")
    masked = rail_pii_mask(hit.text)
    if masked.decision == MODIFY:
        return RailOutcome(MODIFY, payload_out=masked.payload_out,
                           reason="sensitive spans masked")
    return RailOutcome(ALLOW, payload_out=hit.text)


def rail_output_grounding(draft: str, context_texts: list[str],
                          floor: float = 0.2) -> RailOutcome:
    """Hard grounding floor, distinct from the softer validation loop:
    reject drafts whose faithfulness against the context is below the
    floor. With no context there is nothing to ground against, and the
    pipeline's fixed abstention string is its safe state, so both are
    allowed through."""
    if not context_texts or draft.strip() == ABSTENTION:
        return RailOutcome(ALLOW, payload_out=draft)
    score = faithfulness(draft, context_texts)
    if score >= floor:
        return RailOutcome(ALLOW, payload_out=draft)
    return RailOutcome(REJECT,
                       reason=f"faithfulness {score:.2f} below floor {floor}")


def _run_rail(spec: RailSpec, payload, context: dict) -> RailOutcome:
    kind = spec.kind
    if kind == "pii_mask":
        out = rail_pii_mask(payload)
    elif kind == "blocklist":
        out = rail_blocklist(payload, list(spec.params.get("terms", ())))
    elif kind == "retrieval_filter":
        out = rail_retrieval_filter(payload, context.get("role"))
    elif kind == "grounding_floor":
        out = rail_output_grounding(payload, context.get("context_texts", []),
                                    float(spec.params.get("floor", 0.2)))
    elif kind == "length_cap":
        cap = int(spec.params.get("max_chars", 8000))
        if isinstance(payload, str) and len(payload) > cap:
            out = RailOutcome(MODIFY, payload_out=payload[:cap],
                              reason="length capped")
        else:
            out = RailOutcome(ALLOW, payload_out=payload)
    else:
        raise ConfigError(f"unknown rail kind: {kind!r}")
    return RailOutcome(out.decision, spec.rail_id, out.payload_out, out.reason)


class RailEngine:
    """Validated rail chains, one ordered chain per stage."""

    def __init__(self, specs: list[RailSpec] | None = None):
        self.chains: dict[str, list[RailSpec]] = {stage: [] for stage in STAGES}
        self.warnings: list[str] = []
        for spec in specs or []:
            self.chains[spec.stage].append(spec)
        for stage, chain in self.chains.items():
            chain.sort(key=lambda s: (s.order, s.rail_id))
            ids = [s.rail_id for s in chain]
            if len(ids) != len(set(ids)):
                raise ConfigError(f"duplicate rail_id in {stage} chain")
        kind_stages: dict[str, set[str]] = {}
        for stage, chain in self.chains.items():
            for spec in chain:
                kind_stages.setdefault(spec.kind, set()).add(stage)
        for kind, stages in kind_stages.items():
            if len(stages) > 2:
                msg = (f"rail kind {kind!r} configured at {len(stages)} stages; "
                       "check for redundancy")
                self.warnings.append(msg)
                logger.warning(msg)

    def apply(self, stage: str, payload, context: dict | None = None) -> ChainOutcome:
        """Sequential fold over the stage's chain; the first reject
        short-circuits. An empty chain allows the payload unchanged."""
        if stage not in STAGES:
            raise ConfigError(f"unknown rail stage: {stage!r}")
        context = context or {}
        outcomes: list[RailOutcome] = []
        current = payload
        for spec in self.chains[stage]:
            outcome = _run_rail(spec, current, context)
            outcomes.append(outcome)
            if outcome.decision == REJECT:
                return ChainOutcome(stage, True, None, outcome.reason, outcomes)
            current = outcome.payload_out
        return ChainOutcome(stage, False, current, "", outcomes)


def default_rails() -> list[RailSpec]:
    """A reasonable starting chain set: PII masking plus a grounding floor."""
    return [
        RailSpec("input-pii", "input", "pii_mask", order=0),
        RailSpec("retrieval-filter", "retrieval", "retrieval_filter", order=0),
        RailSpec("output-grounding", "output", "grounding_floor", order=0,
                 params={"floor": 0.2}),
        RailSpec("output-pii", "output", "pii_mask", order=1),
    ]
