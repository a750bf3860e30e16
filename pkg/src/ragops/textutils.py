"""Shared text primitives: tokenization, sentence splitting, content
digests and timestamp parsing. All deterministic; everything downstream
(embeddings, dedup hashes, faithfulness) builds on these."""

from __future__ import annotations

import hashlib
import re
from datetime import datetime, timezone

WORD_RE = re.compile(r"\w+", re.UNICODE)

# Sentence enders optionally followed by closing quotes/brackets, then
# whitespace. Offsets partition the text so chunkers can cut at starts.
_SENT_END_RE = re.compile(r"[.!?…]+[\"'»)\]]*\s+")

_EMBEDDED_DATE_RE = re.compile(
    r"\b(\d{4}-\d{2}-\d{2})(?:[T ](\d{2}:\d{2}(?::\d{2})?))?\b"
)

# Small English stopword list; used by query enhancement and faithfulness.
STOPWORDS = frozenset(
    """a an and are as at be but by do does for from had has have he her his
    i if in into is it its me my no not of on or our she so that the their
    them then there these they this to was we were what when where which who
    will with would you your""".split()
)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens of ``text``."""
    return [m.group().lower() for m in WORD_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character (start, end) spans of word tokens over the original text."""
    return [(m.start(), m.end()) for m in WORD_RE.finditer(text)]


def sentence_start_chars(text: str) -> list[int]:
    """Character offsets where sentences begin (always includes 0)."""
    starts = [0]
    for m in _SENT_END_RE.finditer(text):
        if m.end() < len(text):
            starts.append(m.end())
    return starts


def split_sentences(text: str) -> list[str]:
    starts = sentence_start_chars(text)
    ends = starts[1:] + [len(text)]
    return [text[s:e].strip() for s, e in zip(starts, ends) if text[s:e].strip()]


def digest_pair(text: str) -> tuple[str, str]:
    """(64-bit, full) content digest of lowercased, whitespace-collapsed text."""
    normalized = " ".join(text.lower().split())
    full = hashlib.sha256(normalized.encode("utf-8")).hexdigest()
    return full[:16], full


def stable_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_timestamp(value) -> float | None:
    """Parse an epoch number or ISO-8601 string to epoch seconds (UTC).

    Returns None when the value is missing or unparseable.
    """
    if value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        if not text:
            return None
        try:
            return float(text)
        except ValueError:
            pass
        try:
            dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
        except ValueError:
            return None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    return None


def embedded_date(text: str, head: int = 240) -> float | None:
    """First ISO date found near the start of the text, as epoch seconds."""
    m = _EMBEDDED_DATE_RE.search(text[:head])
    if not m:
        return None
    iso = m.group(1) + (f"T{m.group(2)}" if m.group(2) else "")
    return parse_timestamp(iso)


def utcnow() -> float:
    return datetime.now(timezone.utc).timestamp()


def iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()
