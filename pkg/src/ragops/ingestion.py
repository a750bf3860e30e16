"""Source polling and document normalization.

Pulls raw items from configured sources (file directories, JSONL feeds,
HTTP-polled feeds, manual submissions), normalizes supported formats
(plain text, JSON, Markdown) into text documents with metadata, and
batches them toward verification. Deletions and updates are first-class:
an item's operation may be add, update or delete.

Unsupported formats (PDF and friends) are only reachable through the
converter-plugin registry; without a registered converter they are
quarantined, never silently dropped.
"""

from __future__ import annotations

import base64
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, QuarantineError, SourceUnreachable, UnsupportedFormat
from .textutils import parse_timestamp

logger = logging.getLogger(__name__)

SOURCE_KINDS = frozenset({"file_dir", "jsonl_feed", "http_poll", "manual"})
OPERATIONS = frozenset({"add", "update", "delete"})
FORMATS = frozenset({"plain_text", "json", "markdown", "pdf_stub", "other"})

_EXT_FORMATS = {".txt": "plain_text", ".text": "plain_text", ".json": "json",
                ".md": "markdown", ".markdown": "markdown", ".pdf": "pdf_stub"}

# Candidate payload fields per normalized metadata slot, first match wins.
# A SourceConfig.json_map entry overrides the whole candidate list.
_JSON_FIELD_CANDIDATES = {
    "text": ("body", "text", "content"),
    "title": ("title",),
    "authorship": ("author", "authorship"),
    "timestamp": ("timestamp", "date", "updated_at"),
}

# format name -> callable(payload_text, cfg) -> (text, metadata_overrides)
_CONVERTERS: dict[str, object] = {}


def register_converter(fmt: str, converter) -> None:
    """Register a converter plugin for an otherwise unsupported format."""
    _CONVERTERS[fmt] = converter


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    kind: str
    location: str = ""
    poll_interval: float = 0.0
    trust_weight: float = 0.5
    default_acl: tuple[str, ...] = ()
    json_map: dict | None = None

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind: {self.kind!r}")
        if not 0.0 <= self.trust_weight <= 1.0:
            raise ConfigError("trust_weight must be in [0, 1]")
        if self.poll_interval < 0:
            raise ConfigError("poll_interval must be >= 0")


@dataclass(frozen=True)
class RawItem:
    source_id: str
    external_id: str
    operation: str
    payload: bytes
    declared_format: str
    fetched_at: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ConfigError(f"unknown operation: {self.operation!r}")
        if self.declared_format not in FORMATS:
            raise ConfigError(f"unknown format: {self.declared_format!r}")
        if self.operation == "delete" and self.payload:
            raise ConfigError("delete items must carry an empty payload")


@dataclass
class NormalizedDocument:
    doc_key: str
    text: str
    metadata: dict
    acl: tuple[str, ...]
    operation: str


@dataclass(frozen=True)
class Disposition:
    external_id: str
    status: str  # normalized | quarantined | superseded_in_batch
    reason: str = ""


@dataclass
class IngestReceipt:
    source_id: str
    normalized: int
    quarantined: int
    dispositions: list[Disposition]
    documents: list[NormalizedDocument]

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "normalized": self.normalized,
            "quarantined": self.quarantined,
            "dispositions": [
                {"external_id": d.external_id, "status": d.status, "reason": d.reason}
                for d in self.dispositions
            ],
        }


def doc_key_for(cfg: SourceConfig, external_id: str) -> str:
    return f"{cfg.source_id}/{external_id}"


def _decode_cursor(cursor) -> dict:
    if not cursor:
        return {}
    if isinstance(cursor, dict):
        return cursor
    return json.loads(cursor)


def _poll_file_dir(cfg: SourceConfig, cursor: dict) -> tuple[list[RawItem], str]:
    root = Path(cfg.location)
    if not root.is_dir():
        raise SourceUnreachable(
            f"source directory missing: {root}",
            retry_after=max(cfg.poll_interval, 30.0),
        )
    last = (cursor.get("mtime", float("-inf")), cursor.get("name", ""))
    entries = []
    for path in root.rglob("*"):
        if not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        entries.append((path.stat().st_mtime, rel, path))
    entries.sort(key=lambda e: (e[0], e[1]))
    items = []
    new_last = last
    for mtime, rel, path in entries:
        if (mtime, rel) <= last:
            continue
        fmt = _EXT_FORMATS.get(path.suffix.lower(), "other")
        items.append(RawItem(
            source_id=cfg.source_id,
            external_id=rel,
            operation="add",
            payload=path.read_bytes(),
            declared_format=fmt,
            fetched_at=mtime,
        ))
        new_last = (mtime, rel)
    new_cursor = json.dumps({"mtime": new_last[0], "name": new_last[1]}) \
        if new_last != (float("-inf"), "") else json.dumps({})
    return items, new_cursor


def _item_from_feed_line(cfg: SourceConfig, line: str, lineno: int,
                         fetched_at: float) -> RawItem:
    try:
        obj = json.loads(line)
        external_id = obj["external_id"]
        operation = obj.get("operation", "add")
        fmt = obj.get("format", "plain_text")
        if operation == "delete":
            payload = b""
        elif "payload_b64" in obj:
            payload = base64.b64decode(obj["payload_b64"])
        else:
            payload = str(obj.get("payload", "")).encode("utf-8")
        meta = dict(obj.get("metadata") or {})
        return RawItem(cfg.source_id, str(external_id), operation, payload,
                       fmt, fetched_at, meta=meta)
    except Exception as exc:
        # Malformed lines become quarantine-bound items so the batch
        # never partially vanishes.
        logger.warning("malformed feed line %d in %s: %s", lineno, cfg.source_id, exc)
        return RawItem(cfg.source_id, f"__malformed:{lineno}", "add",
                       line.encode("utf-8"), "other", fetched_at,
                       meta={"malformed": f"line {lineno}: {exc}"})


def _poll_jsonl(cfg: SourceConfig, cursor: dict, text: str,
                default_ts: float) -> tuple[list[RawItem], str]:
    # fetched_at must be a pure function of the source state so polling is
    # idempotent: prefer the line's own metadata timestamp, else default_ts.
    consumed = int(cursor.get("line", 0))
    lines = text.splitlines()
    items = []
    for i, line in enumerate(lines):
        if i < consumed or not line.strip():
            continue
        ts = default_ts
        try:
            ts = parse_timestamp(json.loads(line).get("metadata", {}).get("timestamp")) or default_ts
        except Exception:
            pass
        items.append(_item_from_feed_line(cfg, line, i, ts))
    return items, json.dumps({"line": len(lines)})


def _default_http_fetch(url: str) -> str:
    import httpx

    resp = httpx.get(url, timeout=10.0)
    resp.raise_for_status()
    return resp.text


def poll_source(cfg: SourceConfig, cursor=None, fetch=None) -> tuple[list[RawItem], str]:
    """Return items newer than ``cursor`` in stable (per-source) order.

    The cursor is an opaque string; pass the returned value back in to
    resume. Repeating a call with the returned cursor on an unchanged
    source yields no items.
    """
    cur = _decode_cursor(cursor)
    if cfg.kind == "file_dir":
        return _poll_file_dir(cfg, cur)
    if cfg.kind == "jsonl_feed":
        path = Path(cfg.location)
        if not path.is_file():
            raise SourceUnreachable(f"feed file missing: {path}",
                                    retry_after=max(cfg.poll_interval, 30.0))
        return _poll_jsonl(cfg, cur, path.read_text(encoding="utf-8"),
                           default_ts=path.stat().st_mtime)
    if cfg.kind == "http_poll":
        fetcher = fetch or _default_http_fetch
        try:
            body = fetcher(cfg.location)
        except Exception as exc:
            raise SourceUnreachable(f"poll failed for {cfg.location}: {exc}",
                                    retry_after=max(cfg.poll_interval, 30.0)) from exc
        return _poll_jsonl(cfg, cur, body, default_ts=0.0)
    raise ConfigError(f"source kind {cfg.kind!r} does not support polling")


_MD_PATTERNS = [
    (re.compile(r"^```.*$", re.MULTILINE), ""),        # fence lines
    (re.compile(r"!\[([^\]]*)\]\([^)]*\)"), r"\1"),    # images -> alt text
    (re.compile(r"\[([^\]]+)\]\([^)]*\)"), r"\1"),     # links -> text
    (re.compile(r"^#{1,6}\s*", re.MULTILINE), ""),     # heading markers
    (re.compile(r"^\s{0,3}[-*+]\s+", re.MULTILINE), ""),  # list bullets
    (re.compile(r"^>\s?", re.MULTILINE), ""),          # blockquotes
    (re.compile(r"(\*\*|__|\*|_|`)"), ""),             # emphasis / code marks
]
_MD_TITLE_RE = re.compile(r"^#{1,6}\s*(.+?)\s*$", re.MULTILINE)


def _normalize_whitespace(text: str) -> str:
    text = unicodedata.normalize("NFC", text)
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    return "\n".join(lines).strip()


def _strip_markdown(text: str) -> tuple[str, str | None]:
    m = _MD_TITLE_RE.search(text)
    title = m.group(1) if m else None
    for pattern, repl in _MD_PATTERNS:
        text = pattern.sub(repl, text)
    return text, title


def _json_field(obj: dict, slot: str, cfg: SourceConfig):
    if cfg.json_map and slot in cfg.json_map:
        return obj.get(cfg.json_map[slot])
    for name in _JSON_FIELD_CANDIDATES[slot]:
        if name in obj:
            return obj[name]
    return None


def normalize(item: RawItem, cfg: SourceConfig) -> NormalizedDocument:
    """Turn a raw item into a whitespace-normalized text document.

    Pure in (item, cfg): no clock reads, no filesystem access. Raises
    QuarantineError for undecodable or malformed payloads and
    UnsupportedFormat when no converter is registered for the format.
    """
    if item.meta.get("malformed"):
        raise QuarantineError(str(item.meta["malformed"]))

    key = doc_key_for(cfg, item.external_id)
    metadata = {
        "timestamp": item.fetched_at,
        "authorship": None,
        "source": cfg.source_id,
        "title": None,
        "extra": {"fetched_at": item.fetched_at, **item.meta},
    }
    acl = tuple(cfg.default_acl)

    if item.operation == "delete":
        return NormalizedDocument(key, "", metadata, acl, "delete")

    try:
        raw_text = item.payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise QuarantineError(f"undecodable payload: {exc}") from exc

    fmt = item.declared_format
    if fmt == "plain_text":
        text = _normalize_whitespace(raw_text)
    elif fmt == "json":
        try:
            obj = json.loads(raw_text)
        except json.JSONDecodeError as exc:
            raise QuarantineError(f"invalid json payload: {exc}") from exc
        if not isinstance(obj, dict):
            raise QuarantineError("json payload must be an object")
        text = _normalize_whitespace(str(_json_field(obj, "text", cfg) or ""))
        for slot in ("title", "authorship"):
            value = _json_field(obj, slot, cfg)
            if value is not None:
                metadata[slot] = str(value)
        ts = parse_timestamp(_json_field(obj, "timestamp", cfg))
        if ts is not None:
            metadata["timestamp"] = ts
        if isinstance(obj.get("acl"), list):
            acl = tuple(str(r) for r in obj["acl"])
        mapped = {name for names in _JSON_FIELD_CANDIDATES.values() for name in names}
        mapped |= set((cfg.json_map or {}).values()) | {"acl"}
        metadata["extra"].update({k: v for k, v in obj.items() if k not in mapped})
    elif fmt == "markdown":
        stripped, title = _strip_markdown(raw_text)
        text = _normalize_whitespace(stripped)
        if title:
            metadata["title"] = title
    elif fmt in _CONVERTERS:
        text, overrides = _CONVERTERS[fmt](raw_text, cfg)
        text = _normalize_whitespace(text)
        metadata.update(overrides or {})
    else:
        raise UnsupportedFormat(f"no converter registered for format {fmt!r}")

    # Feed envelope metadata refines the defaults.
    for slot in ("title", "authorship"):
        if item.meta.get(slot) is not None:
            metadata[slot] = str(item.meta[slot])
    ts = parse_timestamp(item.meta.get("timestamp"))
    if ts is not None:
        metadata["timestamp"] = ts
    if isinstance(item.meta.get("acl"), list):
        acl = tuple(str(r) for r in item.meta["acl"])

    if not text:
        raise QuarantineError("empty text after normalization")
    return NormalizedDocument(key, text, metadata, acl, item.operation)


def ingest_batch(items: list[RawItem], cfg: SourceConfig) -> IngestReceipt:
    """Normalize a batch; every item ends up normalized or quarantined.

    Duplicate external_ids within one batch resolve last-write-wins by
    fetched_at (ties go to the later list position); superseded items are
    quarantined with reason ``superseded_in_batch`` so counts stay exact.
    """
    for item in items:
        if item.source_id != cfg.source_id:
            raise ConfigError(
                f"item {item.external_id!r} is from source {item.source_id!r}, "
                f"not {cfg.source_id!r}")

    winners: dict[str, int] = {}
    for pos, item in enumerate(items):
        best = winners.get(item.external_id)
        if best is None or items[best].fetched_at <= item.fetched_at:
            winners[item.external_id] = pos

    dispositions: list[Disposition] = []
    documents: list[NormalizedDocument] = []
    normalized = quarantined = 0
    for pos, item in enumerate(items):
        if winners[item.external_id] != pos:
            dispositions.append(Disposition(item.external_id,
                                            "superseded_in_batch",
                                            "newer item in same batch"))
            quarantined += 1
            continue
        try:
            doc = normalize(item, cfg)
        except (QuarantineError, UnsupportedFormat) as exc:
            dispositions.append(Disposition(item.external_id, "quarantined", str(exc)))
            quarantined += 1
            continue
        documents.append(doc)
        dispositions.append(Disposition(item.external_id, "normalized"))
        normalized += 1
    return IngestReceipt(cfg.source_id, normalized, quarantined,
                         dispositions, documents)
