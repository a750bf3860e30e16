import dataclasses
import random

import pytest

from conftest import AcceptReport, make_doc
from ragops.datalake import DataLake, replay
from ragops.errors import (AccessDenied, InvalidTarget, NotFound, OutOfRange,
                           PolicyViolation)
from ragops.textutils import digest_pair


def test_first_upsert_is_version_one(lake):
    dv = lake.upsert(make_doc("k", "first text."), AcceptReport())
    assert dv.version == 1 and dv.status == "live" and dv.lake_seq == 1


def test_second_upsert_archives_first(lake):
    lake.upsert(make_doc("k", "v1 text."), AcceptReport())
    dv2 = lake.upsert(make_doc("k", "v2 text."), AcceptReport("accept_as_new_version"))
    assert dv2.version == 2 and dv2.status == "live"
    assert lake.get("k", version=1).status == "archived"


def test_upsert_guards_decision(lake):
    with pytest.raises(PolicyViolation):
        lake.upsert(make_doc("k", "text."), AcceptReport("drop_duplicate"))


def test_delete_and_double_delete(lake):
    lake.upsert(make_doc("k", "text."), AcceptReport())
    tomb = lake.delete("k")
    assert tomb.status == "deleted_tombstone" and tomb.version == 2
    with pytest.raises(NotFound):
        lake.delete("k")


def test_delete_then_rollback_restores(lake):
    lake.upsert(make_doc("k", "the content."), AcceptReport())
    lake.delete("k")
    with pytest.raises(NotFound):
        lake.get("k")
    restored = lake.rollback("k", 1)
    assert restored.status == "live"
    assert restored.text == "the content."
    assert lake.get("k").version == 3


def test_rollback_appends_with_target_hash_and_acl(lake):
    lake.upsert(make_doc("k", "version one.", acl=("legal",)), AcceptReport())
    lake.upsert(make_doc("k", "version two."), AcceptReport("accept_as_new_version"))
    dv3 = lake.rollback("k", 1)
    assert dv3.version == 3
    assert dv3.content_hash == digest_pair("version one.")
    assert dv3.acl == ("legal",)


def test_rollback_to_live_version_invalid(lake):
    lake.upsert(make_doc("k", "text."), AcceptReport())
    with pytest.raises(InvalidTarget):
        lake.rollback("k", 1)
    with pytest.raises(NotFound):
        lake.rollback("k", 9)


def test_changes_since_empty_and_ordering(lake):
    assert lake.changes_since(lake.lake_seq).entries == ()
    for i in range(3):
        lake.upsert(make_doc(f"k{i}", f"text {i}."), AcceptReport())
    cs = lake.changes_since(0)
    assert [e.lake_seq for e in cs.entries] == [1, 2, 3]
    with pytest.raises(OutOfRange):
        lake.changes_since(99)


def test_get_acl_enforcement(lake):
    lake.upsert(make_doc("pub", "public text."), AcceptReport())
    lake.upsert(make_doc("sec", "secret text.", acl=("legal",)), AcceptReport())
    assert lake.get("pub").doc_key == "pub"
    with pytest.raises(AccessDenied):
        lake.get("sec", role="sales")
    assert lake.get("sec", role="legal").text == "secret text."
    with pytest.raises(AccessDenied):
        lake.get("sec")  # anonymous reader


def test_archived_fetch_with_version(lake):
    lake.upsert(make_doc("k", "v1."), AcceptReport())
    lake.upsert(make_doc("k", "v2."), AcceptReport("accept_as_new_version"))
    old = lake.get("k", version=1)
    assert old.status == "archived" and old.text == "v1."


def _random_ops(rng, lake, keys, n_ops):
    for _ in range(n_ops):
        key = rng.choice(keys)
        op = rng.random()
        live = None
        try:
            live = lake.get(key)
        except (NotFound, AccessDenied):
            live = None
        if op < 0.55 or live is None and op < 0.8:
            decision = "accept_as_new_version" if live is not None else "accept"
            lake.upsert(make_doc(key, f"text {rng.randint(0, 999)} for {key}."),
                        AcceptReport(decision))
        elif op < 0.8 and live is not None:
            lake.delete(key)
        else:
            history = lake.versions_of(key)
            archived = [dv for dv in history if dv.status == "archived"]
            if archived:
                lake.rollback(key, rng.choice(archived).version)


def test_snapshot_replay_equivalence_quantified():
    rng = random.Random(1234)
    for _ in range(1000):
        lake = DataLake()
        keys = [f"k{i}" for i in range(rng.randint(1, 5))]
        _random_ops(rng, lake, keys, rng.randint(1, 25))
        split = rng.randint(0, lake.lake_seq)
        snap = lake.snapshot(split)
        cs = lake.changes_since(split)
        replayed = replay(snap, cs, lake)
        now = lake.snapshot(lake.lake_seq)
        assert set(replayed) == set(now)
        for key in now:
            got = [dataclasses.asdict(dv) for dv in replayed[key]]
            want = [dataclasses.asdict(dv) for dv in now[key]]
            assert got == want


def test_exactly_one_live_after_random_ops():
    rng = random.Random(77)
    for _ in range(100):
        lake = DataLake()
        keys = [f"k{i}" for i in range(3)]
        _random_ops(rng, lake, keys, 30)
        for key in keys:
            live = [dv for dv in lake.versions_of(key) if dv.status == "live"]
            assert len(live) in (0, 1)
            versions = [dv.version for dv in lake.versions_of(key)]
            assert versions == list(range(1, len(versions) + 1))


def test_append_only_archive_bytes_never_decrease():
    rng = random.Random(5)
    lake = DataLake()
    previous = 0
    for i in range(60):
        _random_ops(rng, lake, ["a", "b"], 1)
        archived_bytes = sum(len(dv.text.encode()) for key in ("a", "b")
                             for dv in lake.versions_of(key)
                             if dv.status in ("archived", "deleted_tombstone"))
        assert archived_bytes >= previous
        previous = archived_bytes


def test_integrity_clean_and_gap_detection(lake):
    lake.upsert(make_doc("k", "text."), AcceptReport())
    assert lake.integrity_check().clean
    # inject a gap in version numbering
    lake._versions["k"].append(
        dataclasses.replace(lake._versions["k"][0], version=5))
    report = lake.integrity_check()
    assert not report.clean
    assert any("non-contiguous" in v for v in report.violations)


def test_integrity_cross_module_checks(lake):
    from ragops.retrieval import ChunkPolicy, SearchIndex

    lake.upsert(make_doc("k", "some indexed text here."), AcceptReport())
    index = SearchIndex(ChunkPolicy(16, 2))
    index.apply(lake.changes_since(0), lake)
    assert lake.integrity_check(index=index).clean
    # index goes stale: a new version lands without reindexing
    lake.upsert(make_doc("k", "fresh replacement text."),
                AcceptReport("accept_as_new_version"))
    report = lake.integrity_check(index=index)
    assert not report.clean
    assert any("non-live" in v for v in report.violations)


def test_persistence_round_trip(tmp_path):
    path = tmp_path / "lakedir"
    lake = DataLake(path)
    lake.upsert(make_doc("k", "persisted text."), AcceptReport())
    lake.upsert(make_doc("k", "second version."), AcceptReport("accept_as_new_version"))
    lake.delete("k")
    lake.close()
    reloaded = DataLake(path)
    assert reloaded.lake_seq == 3
    history = reloaded.versions_of("k")
    assert [dv.status for dv in history] == [
        "archived", "archived", "deleted_tombstone"]
    restored = reloaded.rollback("k", 2)
    assert restored.text == "second version."


def test_export_jsonl(lake):
    lake.upsert(make_doc("k", "exported."), AcceptReport())
    lines = list(lake.export_jsonl())
    assert len(lines) == 1 and '"doc_key": "k"' in lines[0]
