from __future__ import annotations

import dataclasses
import os
import signal
import subprocess
import sys
import textwrap

import pytest

import oracles
from aegis import crypto
from aegis.canonical import ZERO_HASH, canonical_dumps, sha3_hex
from aegis.errors import MalformedLog, RangeEmpty, SegmentSealed
from aegis.ilk import (
    ChainedLogEntry,
    EkmResult,
    EvaResult,
    IlkWriter,
    export_cscr,
    parse_cscr,
    parse_records,
    read_log,
    verify_chain,
    verify_cscr,
)
from aegis.poc import StatementInputs, generate_poc
from helpers import build_log, fill_log

KEY = crypto.key_from_seed(bytes(range(32)))
PUB = crypto.public_hex(KEY)


def _lines(path):
    return path.read_bytes().split(b"\n")[:-1]


@pytest.fixture
def log1000(tmp_path):
    path = tmp_path / "ilk.log"
    build_log(path, 1000, KEY).close()
    return path


def test_golden_entry_and_cscr(tmp_path, golden):
    vec = __import__("json").loads((golden / "ed25519_rfc8032_test1.json").read_text())
    key = crypto.key_from_seed(bytes.fromhex(vec["seed"]))
    policy = (golden / "charter_min.sha3").read_text().strip()
    ts = "2025-03-14T09:26:53.589793Z"
    payload = sha3_hex(b"redact record 7")
    poc = dataclasses.replace(
        generate_poc(StatementInputs(payload, policy, 1, "allow-all", ZERO_HASH), key), created_at=ts)
    writer = IlkWriter(tmp_path / "ilk.log", fsync=False)
    writer.append(ChainedLogEntry(0, ts, "48ee7934", policy, "redact_personal_data", "redact_personal_data",
                                  EvaResult.PASS, EkmResult.COMMIT, payload, 1, "allow-all", poc, ZERO_HASH,
                                  detail={"uncertainty": 0.0}))
    writer.close()
    assert (tmp_path / "ilk.log").read_bytes() == (golden / "entry_commit.jsonl").read_bytes()
    records = read_log(tmp_path / "ilk.log")
    assert export_cscr(records) == (golden / "cscr_commit.txt").read_text()
    assert export_cscr(records, full=True) == (golden / "cscr_commit_full.txt").read_text()


def test_untampered_log_intact(log1000):
    report = verify_chain(log1000, PUB)
    assert report.intact and report.entries_checked == 1000 and report.segments == 1


def test_chain_matches_oracle(log1000):
    assert oracles.first_break(read_log(log1000)) is None


def test_byte_flip_in_entry_500(tmp_path, log1000):
    lines = _lines(log1000)
    lines[500] = lines[500].replace(b'"action_category":"', b'"action_category":"X', 1)
    log1000.write_bytes(b"\n".join(lines) + b"\n")
    report = verify_chain(log1000)
    assert not report.intact and report.first_broken_sequence == 500 and report.line == 501


def test_deleted_entry_500(log1000):
    lines = _lines(log1000)
    del lines[500]
    log1000.write_bytes(b"\n".join(lines) + b"\n")
    assert verify_chain(log1000).first_broken_sequence == 500


def test_consistent_rewrite_caught_by_proofs(log1000):
    """Rewriting an entry and re-chaining everything after it fools the hash chain
    but not the unit's signatures."""
    records = read_log(log1000)
    records[10]["matched_rule"] = "forged"
    prev = records[10]["prev_chain_hash"]
    for r in records[10:]:
        r["prev_chain_hash"] = prev
        r["chain_hash"] = oracles.chain_hash(prev, r)
        prev = r["chain_hash"]
    assert verify_chain(records).intact
    report = verify_chain(records, PUB)
    assert not report.intact and report.first_broken_sequence == 10


def test_malformed_line_number():
    with pytest.raises(MalformedLog) as exc:
        parse_records([b'{"type":"entry"}'])
    assert exc.value.line == 1
    with pytest.raises(MalformedLog) as exc:
        parse_records([b"", b"{not json"])
    assert exc.value.line == 2


def test_stale_head_rejected(tmp_path):
    writer = build_log(tmp_path / "l", 2, KEY)
    entry = ChainedLogEntry.from_record(read_log(tmp_path / "l")[0])
    with pytest.raises(ValueError):
        writer.append(entry)


def test_seal_and_new_segment(tmp_path):
    path = tmp_path / "l"
    writer = build_log(path, 3, KEY)
    head = writer.head
    writer.seal(KEY)
    with pytest.raises(SegmentSealed):
        writer.append(ChainedLogEntry.from_record(read_log(path)[0]))
    writer.close()

    reopened = IlkWriter(path, fsync=False)
    assert reopened.sealed and reopened.head == head and reopened.next_sequence == 0
    reopened.open_segment()
    fill_log(reopened, 2, KEY).close()
    records = read_log(path)
    second = [r for r in records if r["type"] == "entry"][3:]
    assert second[0]["sequence"] == 0 and second[0]["prev_chain_hash"] == head
    report = verify_chain(path, PUB)
    assert report.intact and report.segments == 2 and report.entries_checked == 5


def test_forged_seal_signature(tmp_path):
    path = tmp_path / "l"
    writer = build_log(path, 2, KEY)
    writer.seal(crypto.generate_key())
    writer.close()
    assert verify_chain(path).intact
    assert verify_chain(path, PUB).reason == "seal signature invalid"


def test_torn_write_recovered(tmp_path):
    path = tmp_path / "l"
    build_log(path, 5, KEY).close()
    good = path.read_bytes()
    with open(path, "ab") as fh:
        fh.write(b'{"type":"entry","sequence":5,"times')
    writer = IlkWriter(path, fsync=False)
    assert path.read_bytes() == good
    assert writer.next_sequence == 5
    writer.close()
    assert verify_chain(path).intact


def test_export_range_and_errors(log1000):
    records = read_log(log1000)
    text = export_cscr(records, 10, 12)
    blocks = parse_cscr(text)
    assert [b.action_id for b in blocks] == ["a10", "a11", "a12"]
    assert verify_cscr(blocks, records, 10, PUB).intact
    with pytest.raises(RangeEmpty):
        export_cscr(records, 2000, 2001)
    with pytest.raises(RangeEmpty):
        export_cscr([], 0)


def test_cscr_disagreement_detected(log1000):
    records = read_log(log1000)
    text = export_cscr(records, 0, 5).replace("ACTION=a3;", "ACTION=a9;")
    report = verify_cscr(parse_cscr(text), records, 0)
    assert not report.intact and report.first_broken_sequence == 3


def test_cscr_parse_rejects_bad_block():
    with pytest.raises(MalformedLog):
        parse_cscr("[2025-01-01T00:00:00Z] site=abcd1234\nIEPL_SHA3=zz\n")


def test_prefix_immutability(tmp_path):
    path = tmp_path / "l"
    writer = build_log(path, 4, KEY)
    first = export_cscr(read_log(path))
    writer.close()
    build_log(path, 3, KEY).close()
    assert export_cscr(read_log(path)).startswith(first)


def test_lockdown_block_has_certificate_line(unit):
    from helpers import action
    out = unit.gate.publish(action(1, "disable_oversight"))
    text = export_cscr(read_log(unit.state.ilk_path))
    cert_digest = sha3_hex(canonical_dumps(out.certificate.to_dict()))
    assert text.rstrip("\n").endswith(f"EKM=LOCKDOWN\nCHAIN_HASH={out.chain_hash[:16]}...{out.chain_hash[-8:]}\n"
                                      f"SHUTDOWN_CERT={cert_digest}")
    records = read_log(unit.state.ilk_path)
    assert verify_cscr(parse_cscr(text), records, 0, unit.gate.unit_public_key).intact


CRASH_SCRIPT = textwrap.dedent(
    """
    import sys
    from aegis.harness import GovernedUnit
    from aegis.canonical import sha3_hex
    from aegis.eva import ActionProposal
    unit = GovernedUnit(sys.argv[1], fsync=True)
    print("ready", flush=True)
    i = 0
    while True:
        a = ActionProposal(f"c{i}", "redact_personal_data", sha3_hex(str(i).encode()), declared_risk=0.0)
        out = unit.gate.publish(a)
        print(out.kind.value, out.chain_hash, flush=True)
        i += 1
    """
)


@pytest.mark.slow
def test_crash_injection_no_committed_but_unlogged(tmp_path):
    state = tmp_path / "crash"
    proc = subprocess.Popen([sys.executable, "-c", CRASH_SCRIPT, str(state)], stdout=subprocess.PIPE)
    acknowledged = []
    assert proc.stdout.readline().strip() == b"ready"
    while len(acknowledged) < 60:
        kind, chain = proc.stdout.readline().split()
        assert kind == b"COMMITTED"
        acknowledged.append(chain.decode())
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    # a torn tail is possible; opening the writer repairs it
    IlkWriter(state / "ilk.log").close()
    records = read_log(state / "ilk.log")
    on_disk = {r["chain_hash"] for r in records if r["type"] == "entry"}
    assert set(acknowledged) <= on_disk
    assert verify_chain(records).intact
