"""Versioned document store: the single source of truth feeding the
retrieval indexes.

Every write appends one log entry with a globally increasing sequence
number. Version records are immutable once written; "live" vs "archived"
is a view derived from the log (the latest content version of a doc_key
is live unless it was explicitly archived or tombstoned). Rollback is
roll-forward: it appends a new version copying the target's content, so
history is never rewritten.

On-disk layout (optional): a length-prefixed JSON record log with a magic
header, plus a small JSON sidecar used for sanity checks. Recovery scans
the log; the sidecar is advisory.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidTarget, NotFound, AccessDenied, OutOfRange, PolicyViolation
from .ingestion import NormalizedDocument
from .textutils import digest_pair

MAGIC = b"RAGLAKE\x01"
LOG_NAME = "lake.log"
SIDECAR_NAME = "lake.idx.json"

LIVE = "live"
ARCHIVED = "archived"
TOMBSTONE = "deleted_tombstone"


@dataclass(frozen=True)
class DocumentVersion:
    doc_key: str
    version: int
    text: str
    metadata: dict
    acl: tuple[str, ...]
    content_hash: tuple[str, str]
    status: str
    lake_seq: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["acl"] = list(self.acl)
        d["content_hash"] = list(self.content_hash)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DocumentVersion":
        return cls(
            doc_key=d["doc_key"], version=d["version"], text=d["text"],
            metadata=d["metadata"], acl=tuple(d["acl"]),
            content_hash=tuple(d["content_hash"]), status=d["status"],
            lake_seq=d["lake_seq"],
        )


@dataclass(frozen=True)
class ChangeEntry:
    doc_key: str
    version: int
    change: str  # upsert | archive | delete
    lake_seq: int


@dataclass(frozen=True)
class ChangeSet:
    from_seq: int
    to_seq: int
    entries: tuple[ChangeEntry, ...]


@dataclass
class IntegrityReport:
    clean: bool
    violations: list[str] = field(default_factory=list)


class DataLake:
    """Single-writer versioned store with a replayable change feed."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.RLock()
        self._versions: dict[str, list[DocumentVersion]] = {}
        self._live: dict[str, int | None] = {}
        self._log: list[ChangeEntry] = []
        self._seq = 0
        self._path = Path(path) if path else None
        self._log_file = None
        if self._path:
            self._path.mkdir(parents=True, exist_ok=True)
            self._load()
            self._log_file = open(self._path / LOG_NAME, "ab")
            if self._log_file.tell() == 0:
                self._log_file.write(MAGIC)
                self._log_file.flush()

    # ------------------------------------------------------------------
    # persistence

    def _load(self) -> None:
        log_path = self._path / LOG_NAME
        if not log_path.exists():
            return
        with open(log_path, "rb") as fh:
            header = fh.read(len(MAGIC))
            if header != MAGIC:
                raise OSError(f"{log_path}: bad magic header")
            while True:
                size = fh.read(4)
                if not size:
                    break
                (length,) = struct.unpack(">I", size)
                record = json.loads(fh.read(length).decode("utf-8"))
                self._apply_record(record)

    def _apply_record(self, record: dict) -> None:
        change = record["change"]
        entry = ChangeEntry(record["doc_key"], record["version"], change,
                            record["lake_seq"])
        self._seq = max(self._seq, entry.lake_seq)
        self._log.append(entry)
        if change in ("upsert", "delete"):
            dv = DocumentVersion.from_dict(record["record"])
            self._versions.setdefault(dv.doc_key, []).append(dv)
            self._live[dv.doc_key] = dv.version if change == "upsert" else None
        else:  # archive without replacement
            self._live[entry.doc_key] = None

    def _persist(self, entry: ChangeEntry, dv: DocumentVersion | None) -> None:
        if not self._log_file:
            return
        record = {"doc_key": entry.doc_key, "version": entry.version,
                  "change": entry.change, "lake_seq": entry.lake_seq,
                  "record": dv.to_dict() if dv else None}
        blob = json.dumps(record, sort_keys=True).encode("utf-8")
        self._log_file.write(struct.pack(">I", len(blob)))
        self._log_file.write(blob)
        self._log_file.flush()
        sidecar = {"format": 1, "lake_seq": self._seq, "entries": len(self._log)}
        (self._path / SIDECAR_NAME).write_text(json.dumps(sidecar), encoding="utf-8")

    def close(self) -> None:
        if self._log_file:
            self._log_file.close()
            self._log_file = None

    # ------------------------------------------------------------------
    # views

    @property
    def lake_seq(self) -> int:
        return self._seq

    def _status(self, dv: DocumentVersion) -> str:
        if dv.status == TOMBSTONE:
            return TOMBSTONE
        return LIVE if self._live.get(dv.doc_key) == dv.version else ARCHIVED

    def _view(self, dv: DocumentVersion) -> DocumentVersion:
        status = self._status(dv)
        return dv if dv.status == status else dataclasses.replace(dv, status=status)

    def live_versions(self) -> list[DocumentVersion]:
        with self._lock:
            out = []
            for key, ver in sorted(self._live.items()):
                if ver is not None:
                    out.append(self._view(self._versions[key][ver - 1]))
            return out

    def versions_of(self, doc_key: str) -> list[DocumentVersion]:
        with self._lock:
            return [self._view(dv) for dv in self._versions.get(doc_key, [])]

    def record(self, doc_key: str, version: int | None = None) -> DocumentVersion:
        """ACL-free fetch for trusted internal consumers (indexing,
        lineage resolution). External reads go through get()."""
        with self._lock:
            history = self._versions.get(doc_key)
            if not history:
                raise NotFound(f"unknown doc_key: {doc_key!r}")
            if version is None:
                live = self._live.get(doc_key)
                if live is None:
                    raise NotFound(f"no live version for {doc_key!r}")
                dv = history[live - 1]
            else:
                if not 1 <= version <= len(history):
                    raise NotFound(f"{doc_key!r} has no version {version}")
                dv = history[version - 1]
            return self._view(dv)

    def get(self, doc_key: str, version: int | None = None,
            role: str | None = None) -> DocumentVersion:
        """Fetch a version (live by default), enforcing the version's ACL."""
        dv = self.record(doc_key, version)
        if dv.acl and role not in dv.acl:
            raise AccessDenied(f"role {role!r} may not read {doc_key!r}")
        return dv

    # ------------------------------------------------------------------
    # writes

    def _append(self, doc_key: str, change: str, dv: DocumentVersion | None,
                version: int | None = None) -> ChangeEntry:
        self._seq += 1
        if dv is not None:
            dv = dataclasses.replace(dv, lake_seq=self._seq)
            self._versions.setdefault(doc_key, []).append(dv)
            self._live[doc_key] = dv.version if change == "upsert" else None
            version = dv.version
        else:
            self._live[doc_key] = None
        entry = ChangeEntry(doc_key, version or 0, change, self._seq)
        self._log.append(entry)
        self._persist(entry, dv)
        return entry

    def upsert(self, doc: NormalizedDocument, report) -> DocumentVersion:
        """Append a new live version for an accepted document."""
        if report.decision not in ("accept", "accept_as_new_version"):
            raise PolicyViolation(
                f"upsert requires an accept decision, got {report.decision!r}")
        if doc.operation == "delete":
            raise PolicyViolation("delete documents go through delete()")
        with self._lock:
            history = self._versions.get(doc.doc_key, [])
            dv = DocumentVersion(
                doc_key=doc.doc_key,
                version=len(history) + 1,
                text=doc.text,
                metadata=doc.metadata,
                acl=tuple(doc.acl),
                content_hash=digest_pair(doc.text),
                status=LIVE,
                lake_seq=0,
            )
            self._append(doc.doc_key, "upsert", dv)
            return self._view(self._versions[doc.doc_key][-1])

    def delete(self, doc_key: str) -> DocumentVersion:
        """Archive the live version and append a tombstone."""
        with self._lock:
            if self._live.get(doc_key) is None:
                raise NotFound(f"no live version for {doc_key!r}")
            history = self._versions[doc_key]
            tomb = DocumentVersion(
                doc_key=doc_key, version=len(history) + 1, text="",
                metadata={"extra": {}}, acl=(),
                content_hash=digest_pair(""), status=TOMBSTONE, lake_seq=0)
            self._append(doc_key, "delete", tomb)
            return self._versions[doc_key][-1]

    def archive(self, doc_key: str) -> DocumentVersion:
        """Archive the live version without a replacement (conflict loser)."""
        with self._lock:
            live = self._live.get(doc_key)
            if live is None:
                raise NotFound(f"no live version for {doc_key!r}")
            dv = self._versions[doc_key][live - 1]
            self._append(doc_key, "archive", None, version=live)
            return self._view(dv)

    def rollback(self, doc_key: str, to_version: int) -> DocumentVersion:
        """Append a new version whose content copies ``to_version``."""
        with self._lock:
            history = self._versions.get(doc_key)
            if not history or not 1 <= to_version <= len(history):
                raise NotFound(f"{doc_key!r} has no version {to_version}")
            target = history[to_version - 1]
            if self._status(target) == LIVE:
                raise InvalidTarget(f"version {to_version} is already live")
            if target.status == TOMBSTONE:
                raise InvalidTarget("cannot roll back to a tombstone")
            dv = DocumentVersion(
                doc_key=doc_key, version=len(history) + 1, text=target.text,
                metadata=dict(target.metadata), acl=target.acl,
                content_hash=target.content_hash, status=LIVE, lake_seq=0)
            self._append(doc_key, "upsert", dv)
            return self._view(self._versions[doc_key][-1])

    # ------------------------------------------------------------------
    # change feed

    def changes_since(self, seq: int) -> ChangeSet:
        """Exactly the writes with lake_seq in (seq, current]."""
        with self._lock:
            if seq > self._seq:
                raise OutOfRange(f"seq {seq} is beyond current {self._seq}")
            entries = tuple(e for e in self._log if e.lake_seq > seq)
            return ChangeSet(from_seq=seq, to_seq=self._seq, entries=entries)

    def snapshot(self, seq: int | None = None) -> dict[str, list[DocumentVersion]]:
        """Materialized state (statuses as of ``seq``), for replay checks."""
        with self._lock:
            if seq is None:
                seq = self._seq
            if seq > self._seq:
                raise OutOfRange(f"seq {seq} is beyond current {self._seq}")
            live: dict[str, int | None] = {}
            versions: dict[str, list[DocumentVersion]] = {}
            for entry in self._log:
                if entry.lake_seq > seq:
                    break
                if entry.change == "upsert":
                    dv = self._versions[entry.doc_key][entry.version - 1]
                    versions.setdefault(entry.doc_key, []).append(dv)
                    live[entry.doc_key] = entry.version
                elif entry.change == "delete":
                    dv = self._versions[entry.doc_key][entry.version - 1]
                    versions.setdefault(entry.doc_key, []).append(dv)
                    live[entry.doc_key] = None
                else:
                    live[entry.doc_key] = None
            out: dict[str, list[DocumentVersion]] = {}
            for key, history in versions.items():
                out[key] = []
                for dv in history:
                    if dv.status == TOMBSTONE:
                        status = TOMBSTONE
                    elif live.get(key) == dv.version:
                        status = LIVE
                    else:
                        status = ARCHIVED
                    out[key].append(dv if dv.status == status
                                    else dataclasses.replace(dv, status=status))
            return out

    # ------------------------------------------------------------------
    # integrity

    def integrity_check(self, index=None, tickets=None) -> IntegrityReport:
        """Structural invariants, plus cross-module checks when given an
        index (chunk references) or a ticket store (dangling conflicts)."""
        violations: list[str] = []
        with self._lock:
            for key, history in self._versions.items():
                numbers = [dv.version for dv in history]
                if numbers != list(range(1, len(history) + 1)):
                    violations.append(f"{key}: non-contiguous versions {numbers}")
                live_count = sum(1 for dv in history if self._status(dv) == LIVE)
                if live_count > 1:
                    violations.append(f"{key}: {live_count} live versions")
            if index is not None:
                for chunk in index.chunks():
                    history = self._versions.get(chunk.doc_key, [])
                    if not 1 <= chunk.version <= len(history):
                        violations.append(
                            f"index chunk {chunk.chunk_id}: missing version")
                    elif self._live.get(chunk.doc_key) != chunk.version:
                        violations.append(
                            f"index chunk {chunk.chunk_id}: references "
                            f"non-live version {chunk.version}")
            if tickets is not None:
                for ticket in tickets.open_tickets():
                    for key in (ticket.doc_key_a, ticket.doc_key_b):
                        if self._live.get(key) is None:
                            violations.append(
                                f"ticket {ticket.ticket_id}: {key} has no "
                                f"live version")
        return IntegrityReport(clean=not violations, violations=violations)

    def export_jsonl(self):
        """Yield live versions as JSON lines (lake export format)."""
        for dv in self.live_versions():
            yield json.dumps(dv.to_dict(), sort_keys=True)


def replay(snapshot: dict[str, list[DocumentVersion]], changes: ChangeSet,
           lake: DataLake) -> dict[str, list[DocumentVersion]]:
    """Apply a ChangeSet to a snapshot, fetching records from the lake.

    Replaying changes_since(s) onto snapshot(s) must reproduce
    snapshot(to_seq) field-exactly; the index updater relies on the same
    contract.
    """
    state = {key: list(history) for key, history in snapshot.items()}
    live: dict[str, int | None] = {}
    for key, history in state.items():
        live[key] = None
        for dv in history:
            if dv.status == LIVE:
                live[key] = dv.version
    for entry in changes.entries:
        if entry.change in ("upsert", "delete"):
            record = lake._versions[entry.doc_key][entry.version - 1]
            state.setdefault(entry.doc_key, []).append(record)
            live[entry.doc_key] = (entry.version if entry.change == "upsert"
                                   else None)
        else:
            live[entry.doc_key] = None
    out: dict[str, list[DocumentVersion]] = {}
    for key, history in state.items():
        out[key] = []
        for dv in history:
            if dv.status == TOMBSTONE:
                status = TOMBSTONE
            elif live.get(key) == dv.version:
                status = LIVE
            else:
                status = ARCHIVED
            out[key].append(dv if dv.status == status
                            else dataclasses.replace(dv, status=status))
    return out
