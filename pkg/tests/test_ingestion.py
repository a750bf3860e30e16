import base64
import json
import time

import pytest

from ragops.errors import ConfigError, QuarantineError, SourceUnreachable, UnsupportedFormat
from ragops.ingestion import (RawItem, SourceConfig, ingest_batch, normalize,
                              poll_source, register_converter)


def cfg_for(tmp_path, kind="file_dir", **kw):
    return SourceConfig(source_id="src", kind=kind, location=str(tmp_path), **kw)


def raw(payload, fmt="plain_text", external_id="x", op="add", ts=1.0, meta=None):
    return RawItem("src", external_id, op, payload, fmt, ts, meta=meta or {})


# ---------------------------------------------------------------- poll


def test_poll_empty_directory(tmp_path):
    items, cursor = poll_source(cfg_for(tmp_path), None)
    assert items == []
    items2, cursor2 = poll_source(cfg_for(tmp_path), cursor)
    assert items2 == [] and cursor2 == cursor


def test_poll_orders_by_mtime_then_name(tmp_path):
    (tmp_path / "b.txt").write_text("bee")
    (tmp_path / "a.txt").write_text("ay")
    now = time.time()
    import os

    os.utime(tmp_path / "b.txt", (now - 100, now - 100))
    os.utime(tmp_path / "a.txt", (now - 50, now - 50))
    items, cursor = poll_source(cfg_for(tmp_path), None)
    assert [i.external_id for i in items] == ["b.txt", "a.txt"]
    assert all(i.operation == "add" for i in items)
    # idempotence: repeated call with the returned cursor yields nothing
    again, cursor2 = poll_source(cfg_for(tmp_path), cursor)
    assert again == [] and cursor2 == cursor


def test_poll_stability_across_calls(tmp_path):
    for name in ("one.txt", "two.txt", "three.txt"):
        (tmp_path / name).write_text(name)
    first, _ = poll_source(cfg_for(tmp_path), None)
    second, _ = poll_source(cfg_for(tmp_path), None)
    assert [i.external_id for i in first] == [i.external_id for i in second]


def test_poll_missing_directory_is_retryable(tmp_path):
    with pytest.raises(SourceUnreachable) as err:
        poll_source(cfg_for(tmp_path / "missing"), None)
    assert err.value.retry_after > 0


def test_poll_manual_not_pollable(tmp_path):
    with pytest.raises(ConfigError):
        poll_source(SourceConfig("m", "manual"), None)


def test_poll_jsonl_feed_with_cursor_and_malformed_line(tmp_path):
    feed = tmp_path / "feed.jsonl"
    lines = [
        json.dumps({"external_id": "a", "operation": "add",
                    "format": "plain_text", "payload": "alpha"}),
        "{this is not json",
        json.dumps({"external_id": "b", "operation": "delete",
                    "format": "plain_text"}),
    ]
    feed.write_text("\n".join(lines))
    cfg = SourceConfig("src", "jsonl_feed", str(feed))
    items, cursor = poll_source(cfg, None)
    assert len(items) == 3  # malformed line becomes a quarantine-bound item
    assert items[1].meta.get("malformed")
    assert items[2].operation == "delete" and items[2].payload == b""
    again, _ = poll_source(cfg, cursor)
    assert again == []


def test_poll_http_uses_injected_fetch():
    cfg = SourceConfig("src", "http_poll", "http://feed.internal/x")
    body = json.dumps({"external_id": "a", "payload": "text"})
    items, _ = poll_source(cfg, None, fetch=lambda url: body)
    assert [i.external_id for i in items] == ["a"]
    with pytest.raises(SourceUnreachable):
        poll_source(cfg, None, fetch=lambda url: 1 / 0)


# ---------------------------------------------------------------- normalize


def test_normalize_plain_text_newlines(tmp_path):
    doc = normalize(raw(b"hello\r\n\r\nworld"), cfg_for(tmp_path))
    assert doc.text == "hello\n\nworld"
    assert doc.metadata["source"] == "src"
    assert doc.doc_key == "src/x"


def test_normalize_json_field_mapping(tmp_path):
    payload = json.dumps({"title": "T", "body": "B", "author": "A"}).encode()
    doc = normalize(raw(payload, fmt="json"), cfg_for(tmp_path))
    assert doc.text == "B"
    assert doc.metadata["title"] == "T"
    assert doc.metadata["authorship"] == "A"


def test_normalize_json_custom_map(tmp_path):
    cfg = SourceConfig("src", "file_dir", str(tmp_path),
                       json_map={"text": "inhalt", "title": "kopf"})
    payload = json.dumps({"inhalt": "Der Text.", "kopf": "K"}).encode()
    doc = normalize(raw(payload, fmt="json"), cfg)
    assert doc.text == "Der Text."
    assert doc.metadata["title"] == "K"


def test_normalize_delete_passthrough(tmp_path):
    doc = normalize(raw(b"", op="delete"), cfg_for(tmp_path))
    assert doc.operation == "delete" and doc.text == ""


def test_normalize_undecodable_bytes_quarantined(tmp_path):
    with pytest.raises(QuarantineError):
        normalize(raw(b"\xff\xfe\x01invalid"), cfg_for(tmp_path))


def test_normalize_unsupported_format_needs_plugin(tmp_path):
    with pytest.raises(UnsupportedFormat):
        normalize(raw(b"%PDF-1.4 fake", fmt="pdf_stub"), cfg_for(tmp_path))
    register_converter("pdf_stub", lambda text, cfg: (text.replace("%PDF-1.4", ""), {}))
    try:
        doc = normalize(raw(b"%PDF-1.4 extracted words", fmt="pdf_stub"),
                        cfg_for(tmp_path))
        assert "extracted words" in doc.text
    finally:
        from ragops.ingestion import _CONVERTERS

        _CONVERTERS.pop("pdf_stub", None)


def test_normalize_markdown_strips_syntax(tmp_path):
    md = b"# Title\n\nSome **bold** text with a [link](http://e.co).\n- item\n"
    doc = normalize(raw(md, fmt="markdown"), cfg_for(tmp_path))
    assert doc.metadata["title"] == "Title"
    assert "**" not in doc.text and "](" not in doc.text
    assert "bold" in doc.text and "link" in doc.text


def test_normalize_acl_defaults_and_override(tmp_path):
    cfg = SourceConfig("src", "file_dir", str(tmp_path), default_acl=("legal",))
    doc = normalize(raw(b"text body here."), cfg)
    assert doc.acl == ("legal",)
    payload = json.dumps({"body": "secret", "acl": ["finance"]}).encode()
    doc2 = normalize(raw(payload, fmt="json"), cfg)
    assert doc2.acl == ("finance",)


def test_normalize_is_pure(tmp_path):
    item = raw(b"same bytes in, same doc out.")
    cfg = cfg_for(tmp_path)
    a = normalize(item, cfg)
    b = normalize(item, cfg)
    assert a == b


def test_normalize_base64_payload(tmp_path):
    blob = base64.b64encode("binary-ish text".encode()).decode()
    line = json.dumps({"external_id": "z", "payload_b64": blob})
    feed = tmp_path / "f.jsonl"
    feed.write_text(line)
    items, _ = poll_source(SourceConfig("src", "jsonl_feed", str(feed)), None)
    doc = normalize(items[0], cfg_for(tmp_path))
    assert doc.text == "binary-ish text"


# ---------------------------------------------------------------- batches


def test_ingest_batch_empty(tmp_path):
    receipt = ingest_batch([], cfg_for(tmp_path))
    assert receipt.normalized == 0 and receipt.quarantined == 0


def test_ingest_batch_counts_sum_exactly(tmp_path):
    items = [raw(b"good one.", external_id=f"g{i}", ts=float(i)) for i in range(3)]
    items.append(raw(b"\xff\xfebroken", external_id="bad"))
    receipt = ingest_batch(items, cfg_for(tmp_path))
    assert receipt.normalized == 3
    assert receipt.quarantined == 1
    assert receipt.normalized + receipt.quarantined == len(items)
    reasons = {d.external_id: d.status for d in receipt.dispositions}
    assert reasons["bad"] == "quarantined"


def test_ingest_batch_duplicate_external_id_last_write_wins(tmp_path):
    items = [raw(b"older text.", external_id="dup", ts=1.0),
             raw(b"newer text.", external_id="dup", ts=2.0)]
    receipt = ingest_batch(items, cfg_for(tmp_path))
    assert receipt.normalized == 1 and receipt.quarantined == 1
    statuses = [d.status for d in receipt.dispositions]
    assert statuses == ["superseded_in_batch", "normalized"]
    assert receipt.documents[0].text == "newer text."


def test_ingest_batch_rejects_foreign_items(tmp_path):
    foreign = RawItem("other", "x", "add", b"t.", "plain_text", 1.0)
    with pytest.raises(ConfigError):
        ingest_batch([foreign], cfg_for(tmp_path))


def test_no_item_loss_property(tmp_path):
    import random

    rng = random.Random(11)
    cfg = cfg_for(tmp_path)
    for _ in range(50):
        items = []
        for i in range(rng.randint(0, 12)):
            kind = rng.random()
            if kind < 0.2:
                items.append(raw(b"\xff\xfe", external_id=f"i{i}"))
            elif kind < 0.4:
                items.append(raw(b"data", fmt="other", external_id=f"i{i}"))
            else:
                items.append(raw(f"text {i}.".encode(),
                                 external_id=f"i{rng.randint(0, 6)}",
                                 ts=float(i)))
        receipt = ingest_batch(items, cfg)
        assert receipt.normalized + receipt.quarantined == len(items)
