"""Append-only, hash-chained decision log and its CSCR text export.

Storage is one file of canonical-JSON lines. Entry lines carry
``"type": "entry"``; a ``"type": "seal"`` trailer freezes the current
segment and carries the shutdown certificate. The next entry after a seal
opens a new segment: its sequence restarts at 0 and its
``prev_chain_hash`` is the sealed head, so the chain runs unbroken across
segments.

    chain_hash = SHA3-256(prev_chain_hash || canonical(other fields))
"""

from __future__ import annotations

import dataclasses
import enum
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import crypto
from .canonical import (
    ZERO_HASH,
    canonical_dumps,
    canonical_loads,
    seconds_precision,
    sha3_hex,
    utc_now,
)
from .certificate import ShutdownCertificate
from .errors import MalformedLog, RangeEmpty, SegmentSealed
from .poc import ProofOfConduct, StatementInputs, verify_poc

ILK_FILE = "ilk.log"


class EvaResult(str, enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"


class EkmResult(str, enum.Enum):
    COMMIT = "COMMIT"
    VETO = "VETO"
    LOCKDOWN = "LOCKDOWN"
    GOVERN = "GOVERN"


ENTRY_FIELDS = (
    "sequence",
    "timestamp",
    "site_id",
    "policy_hash",
    "action_id",
    "action_category",
    "eva_result",
    "ekm_result",
    "payload_digest",
    "verdict_bit",
    "matched_rule",
    "poc",
    "poc_digest",
    "detail",
    "prev_chain_hash",
    "chain_hash",
)


@dataclass(frozen=True)
class ChainedLogEntry:
    sequence: int
    timestamp: str
    site_id: str
    policy_hash: str
    action_id: str
    action_category: str
    eva_result: EvaResult
    ekm_result: EkmResult
    payload_digest: str
    verdict_bit: int
    matched_rule: str
    poc: ProofOfConduct
    prev_chain_hash: str
    chain_hash: str = ""
    detail: Mapping[str, Any] = field(default_factory=dict)

    @property
    def poc_digest(self) -> str:
        return self.poc.digest()

    def body(self) -> dict[str, Any]:
        return {
            "sequence": self.sequence,
            "timestamp": self.timestamp,
            "site_id": self.site_id,
            "policy_hash": self.policy_hash,
            "action_id": self.action_id,
            "action_category": self.action_category,
            "eva_result": self.eva_result.value,
            "ekm_result": self.ekm_result.value,
            "payload_digest": self.payload_digest,
            "verdict_bit": self.verdict_bit,
            "matched_rule": self.matched_rule,
            "poc": self.poc.to_dict(),
            "poc_digest": self.poc_digest,
            "detail": dict(self.detail),
        }

    def to_record(self) -> dict[str, Any]:
        record = {"type": "entry", **self.body()}
        record["prev_chain_hash"] = self.prev_chain_hash
        record["chain_hash"] = self.chain_hash
        return record

    def statement_inputs(self) -> StatementInputs:
        return StatementInputs(
            self.payload_digest, self.policy_hash, self.verdict_bit, self.matched_rule, self.prev_chain_hash
        )

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> ChainedLogEntry:
        return cls(
            sequence=record["sequence"],
            timestamp=record["timestamp"],
            site_id=record["site_id"],
            policy_hash=record["policy_hash"],
            action_id=record["action_id"],
            action_category=record["action_category"],
            eva_result=EvaResult(record["eva_result"]),
            ekm_result=EkmResult(record["ekm_result"]),
            payload_digest=record["payload_digest"],
            verdict_bit=record["verdict_bit"],
            matched_rule=record["matched_rule"],
            poc=ProofOfConduct.from_dict(record["poc"]),
            prev_chain_hash=record["prev_chain_hash"],
            chain_hash=record["chain_hash"],
            detail=dict(record.get("detail") or {}),
        )


def compute_chain_hash(prev_chain_hash: str, body: Mapping[str, Any]) -> str:
    return sha3_hex(bytes.fromhex(prev_chain_hash) + canonical_dumps(body))


def record_chain_hash(record: Mapping[str, Any]) -> str:
    """Recompute the chain hash of a raw entry record as stored on disk."""
    body = {k: v for k, v in record.items() if k not in ("type", "prev_chain_hash", "chain_hash", "_line")}
    return compute_chain_hash(record["prev_chain_hash"], body)


@dataclass(frozen=True)
class SealRecord:
    segment: int
    sealed_head: str
    entry_count: int
    sealed_at: str
    unit_signature: str = ""

    def payload(self) -> bytes:
        return canonical_dumps(
            {"sealed_head": self.sealed_head, "entry_count": self.entry_count, "sealed_at": self.sealed_at}
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "segment": self.segment,
            "sealed_head": self.sealed_head,
            "entry_count": self.entry_count,
            "sealed_at": self.sealed_at,
            "unit_signature": self.unit_signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SealRecord:
        return cls(
            segment=data["segment"],
            sealed_head=data["sealed_head"],
            entry_count=data["entry_count"],
            sealed_at=data["sealed_at"],
            unit_signature=data.get("unit_signature", ""),
        )


# --- reading ---------------------------------------------------------------


def parse_records(lines: Iterable[bytes | str]) -> list[dict[str, Any]]:
    records = []
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        try:
            record = canonical_loads(line)
        except ValueError as exc:
            raise MalformedLog(f"not a canonical record: {exc}", lineno) from None
        if not isinstance(record, dict) or record.get("type") not in ("entry", "seal"):
            raise MalformedLog("record type must be 'entry' or 'seal'", lineno)
        if record["type"] == "entry":
            missing = [f for f in ENTRY_FIELDS if f not in record]
            if missing:
                raise MalformedLog(f"entry missing {', '.join(missing)}", lineno)
        elif not isinstance(record.get("seal"), dict):
            raise MalformedLog("seal record without seal body", lineno)
        record["_line"] = lineno
        records.append(record)
    return records


def read_log(path: str | os.PathLike) -> list[dict[str, Any]]:
    with open(path, "rb") as fh:
        return parse_records(fh.read().split(b"\n"))


def entries(records: Iterable[Mapping[str, Any]]) -> list[ChainedLogEntry]:
    return [ChainedLogEntry.from_record(r) for r in records if r["type"] == "entry"]


# --- verification ----------------------------------------------------------


@dataclass
class ChainVerificationReport:
    intact: bool
    entries_checked: int = 0
    segments: int = 0
    first_broken_sequence: int | None = None
    broken_segment: int | None = None
    line: int | None = None
    reason: str | None = None
    head: str = ZERO_HASH

    def to_dict(self) -> dict[str, Any]:
        return {
            "intact": self.intact,
            "entries_checked": self.entries_checked,
            "segments": self.segments,
            "first_broken_sequence": self.first_broken_sequence,
            "broken_segment": self.broken_segment,
            "line": self.line,
            "reason": self.reason,
            "head": self.head,
        }


def _entry_problem(record: Mapping[str, Any], unit_public_key: str | None) -> str | None:
    try:
        if record_chain_hash(record) != record["chain_hash"]:
            return "chain hash mismatch"
    except (ValueError, TypeError, KeyError) as exc:
        return f"unhashable entry: {exc}"
    if unit_public_key is not None:
        try:
            poc = ProofOfConduct.from_dict(record["poc"])
            if poc.digest() != record["poc_digest"]:
                return "poc digest mismatch"
            inputs = StatementInputs(
                record["payload_digest"],
                record["policy_hash"],
                record["verdict_bit"],
                record["matched_rule"],
                record["prev_chain_hash"],
            )
            if not verify_poc(poc, inputs, unit_public_key):
                return "proof of conduct does not verify"
        except Exception as exc:
            return f"proof of conduct unreadable: {exc}"
    return None


def verify_chain(
    log: str | os.PathLike | Iterable[Mapping[str, Any]],
    unit_public_key: str | None = None,
) -> ChainVerificationReport:
    """Recompute every chain hash and report the first break.

    Works on an exported log alone. With ``unit_public_key`` each entry's
    proof of conduct and each seal signature are checked as well.
    """
    records = read_log(log) if isinstance(log, (str, os.PathLike)) else list(log)
    report = ChainVerificationReport(intact=True)
    expected_prev = ZERO_HASH
    expected_seq = 0
    segment = 0

    def broken(reason: str, record: Mapping[str, Any]) -> ChainVerificationReport:
        report.intact = False
        report.first_broken_sequence = expected_seq
        report.broken_segment = segment
        report.line = record.get("_line")
        report.reason = reason
        return report

    for record in records:
        if record["type"] == "seal":
            seal = SealRecord.from_dict(record["seal"])
            if seal.sealed_head != expected_prev or seal.entry_count != expected_seq:
                return broken("seal does not match segment head", record)
            if unit_public_key is not None and not crypto.verify(
                unit_public_key, seal.unit_signature, seal.payload()
            ):
                return broken("seal signature invalid", record)
            if unit_public_key is not None and record.get("certificate"):
                cert = ShutdownCertificate.from_dict(record["certificate"])
                if cert.sealed_log_head != seal.sealed_head or not cert.verify(unit_public_key):
                    return broken("shutdown certificate invalid", record)
            segment += 1
            expected_seq = 0
            continue
        if record.get("sequence") != expected_seq:
            return broken(f"expected sequence {expected_seq}, found {record.get('sequence')!r}", record)
        if record.get("prev_chain_hash") != expected_prev:
            return broken("prev_chain_hash does not link to predecessor", record)
        problem = _entry_problem(record, unit_public_key)
        if problem:
            return broken(problem, record)
        expected_prev = record["chain_hash"]
        expected_seq += 1
        report.entries_checked += 1
    report.segments = segment + (1 if expected_seq else 0)
    report.head = expected_prev
    return report


# --- writing ---------------------------------------------------------------


class IlkWriter:
    """Single writer over ``ilk.log``. Entries are durable before append returns."""

    def __init__(self, path: str | os.PathLike, *, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._fh = open(self.path, "ab")

    def _recover(self) -> None:
        self.head = ZERO_HASH
        self.next_sequence = 0
        self.segment = 0
        self.sealed = False
        self.last_seal: SealRecord | None = None
        self.last_certificate: dict[str, Any] | None = None
        self.entry_total = 0
        if not self.path.exists():
            self.path.touch()
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            # torn final write: drop the partial line
            data = data[: data.rfind(b"\n") + 1]
            with open(self.path, "r+b") as fh:
                fh.truncate(len(data))
                fh.flush()
                os.fsync(fh.fileno())
        for record in parse_records(data.split(b"\n")):
            if record["type"] == "seal":
                self.last_seal = SealRecord.from_dict(record["seal"])
                self.last_certificate = record.get("certificate")
                self.sealed = True
            else:
                if self.sealed:
                    self.sealed = False
                    self.segment += 1
                self.head = record["chain_hash"]
                self.next_sequence = record["sequence"] + 1
                self.entry_total += 1
        if self.sealed:
            self.next_sequence = 0

    def _write(self, record: Mapping[str, Any]) -> None:
        self._fh.write(canonical_dumps(record) + b"\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def append(self, entry: ChainedLogEntry) -> ChainedLogEntry:
        """Chain ``entry`` onto the head; sequence and hashes are assigned here."""
        if self.sealed:
            raise SegmentSealed(f"segment {self.segment} is sealed")
        if entry.prev_chain_hash != self.head:
            raise ValueError("entry was prepared against a stale head")
        draft = dataclasses.replace(entry, sequence=self.next_sequence, chain_hash="")
        final = dataclasses.replace(draft, chain_hash=compute_chain_hash(self.head, draft.body()))
        self._write(final.to_record())
        self.head = final.chain_hash
        self.next_sequence += 1
        self.entry_total += 1
        return final

    def seal(self, unit_signing_key, certificate: Mapping[str, Any] | None = None) -> SealRecord:
        if self.sealed:
            raise SegmentSealed(f"segment {self.segment} is already sealed")
        record = SealRecord(self.segment, self.head, self.next_sequence, utc_now())
        record = SealRecord(
            record.segment,
            record.sealed_head,
            record.entry_count,
            record.sealed_at,
            crypto.sign(unit_signing_key, record.payload()),
        )
        self._write({"type": "seal", "seal": record.to_dict(), "certificate": dict(certificate or {}) or None})
        self.sealed = True
        self.last_seal = record
        self.last_certificate = dict(certificate) if certificate else None
        return record

    def open_segment(self) -> None:
        """Start a fresh segment after a seal; its entry 0 links to the sealed head."""
        if not self.sealed:
            raise ValueError("current segment is not sealed")
        self.sealed = False
        self.segment += 1
        self.next_sequence = 0

    def disk_tail_head(self) -> str:
        """Chain hash of the last entry actually on disk (for continuity checks)."""
        with open(self.path, "rb") as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            fh.seek(max(0, size - 65536))
            tail = fh.read().split(b"\n")
        for line in reversed(tail):
            if not line.strip():
                continue
            try:
                record = canonical_loads(line)
            except ValueError:
                return ""
            if record.get("type") == "entry":
                return record.get("chain_hash", "")
            if record.get("type") == "seal":
                return record["seal"].get("sealed_head", "")
        return ZERO_HASH

    def close(self) -> None:
        self._fh.close()


# --- CSCR export -----------------------------------------------------------

_CSCR_LINES = (
    re.compile(r"\[(?P<timestamp>\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ)\] site=(?P<site_id>[0-9a-f]{8})"),
    re.compile(r"IEPL_SHA3=(?P<policy_hash>[0-9a-f]{16}\.\.\.[0-9a-f]{8}|[0-9a-f]{64})"),
    re.compile(r"PoC_STARK=(?P<poc_digest>[0-9a-f]{16}\.\.\.[0-9a-f]{8}|[0-9a-f]{64})"),
    re.compile(r"ACTION=(?P<action_id>[^;\n]+); EVA=(?P<eva>PASS|FAIL); EKM=(?P<ekm>COMMIT|VETO|LOCKDOWN|GOVERN)"),
    re.compile(r"CHAIN_HASH=(?P<chain_hash>[0-9a-f]{16}\.\.\.[0-9a-f]{8}|[0-9a-f]{64})"),
)
_CERT_LINE = re.compile(r"SHUTDOWN_CERT=(?P<certificate>[0-9a-f]{64})")


def display_hex(value: str, full: bool = False) -> str:
    if full or len(value) < 24:
        return value
    return f"{value[:16]}...{value[-8:]}"


@dataclass(frozen=True)
class CscrBlock:
    timestamp: str
    site_id: str
    policy_hash: str
    poc_digest: str
    action_id: str
    eva: str
    ekm: str
    chain_hash: str
    certificate: str | None = None


def _certificates_by_head(records: Iterable[Mapping[str, Any]]) -> dict[str, str]:
    out = {}
    for record in records:
        if record["type"] == "seal" and record.get("certificate"):
            out[record["seal"]["sealed_head"]] = sha3_hex(canonical_dumps(record["certificate"]))
    return out


def export_cscr(
    records: Iterable[Mapping[str, Any]],
    start: int = 0,
    end: int | None = None,
    *,
    full: bool = False,
) -> str:
    """Render entries ``start..end`` (inclusive, by position in the log) as CSCR blocks.

    Hashes are shown as ``first16...last8`` unless ``full``; a LOCKDOWN entry that
    closed its segment gets a trailing ``SHUTDOWN_CERT=`` line.
    """
    records = list(records)
    certs = _certificates_by_head(records)
    chosen = entries(records)
    last = len(chosen) - 1 if end is None else min(end, len(chosen) - 1)
    if start < 0 or start > last:
        raise RangeEmpty(f"no entries in range {start}..{end}")
    blocks = []
    for entry in chosen[start : last + 1]:
        lines = [
            f"[{seconds_precision(entry.timestamp)}] site={entry.site_id}",
            f"IEPL_SHA3={display_hex(entry.policy_hash, full)}",
            f"PoC_STARK={display_hex(entry.poc_digest, full)}",
            f"ACTION={entry.action_id}; EVA={entry.eva_result.value}; EKM={entry.ekm_result.value}",
            f"CHAIN_HASH={display_hex(entry.chain_hash, full)}",
        ]
        if entry.ekm_result is EkmResult.LOCKDOWN and entry.chain_hash in certs:
            lines.append(f"SHUTDOWN_CERT={certs[entry.chain_hash]}")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def parse_cscr(text: str) -> list[CscrBlock]:
    blocks: list[CscrBlock] = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        fields: dict[str, str] = {}
        for pattern in _CSCR_LINES:
            if i >= len(lines):
                raise MalformedLog("truncated CSCR block", i + 1)
            m = pattern.fullmatch(lines[i])
            if m is None:
                raise MalformedLog(f"expected {pattern.pattern.split('=')[0]!r} line", i + 1)
            fields.update(m.groupdict())
            i += 1
        certificate = None
        if i < len(lines) and (m := _CERT_LINE.fullmatch(lines[i])):
            certificate = m.group("certificate")
            i += 1
        blocks.append(CscrBlock(certificate=certificate, **fields))
    return blocks


def _hex_matches(shown: str, actual: str) -> bool:
    if "..." in shown:
        head, tail = shown.split("...")
        return actual.startswith(head) and actual.endswith(tail)
    return shown == actual


def locate_cscr_start(blocks: list[CscrBlock], records: Iterable[Mapping[str, Any]]) -> int:
    """Log position of the entry the first block was rendered from (0 if none match)."""
    if blocks:
        for i, entry in enumerate(entries(records)):
            if _hex_matches(blocks[0].chain_hash, entry.chain_hash):
                return i
    return 0


def verify_cscr(
    blocks: list[CscrBlock],
    records: Iterable[Mapping[str, Any]],
    start: int = 0,
    unit_public_key: str | None = None,
) -> ChainVerificationReport:
    """Cross-check CSCR blocks against the structured log they were exported from."""
    records = list(records)
    report = verify_chain(records, unit_public_key)
    if not report.intact:
        return report
    certs = _certificates_by_head(records)
    chosen = entries(records)[start:]
    if len(blocks) > len(chosen):
        return ChainVerificationReport(False, reason="CSCR has more blocks than the log has entries")
    for offset, (block, entry) in enumerate(zip(blocks, chosen)):
        ok = (
            block.timestamp == seconds_precision(entry.timestamp)
            and block.site_id == entry.site_id
            and _hex_matches(block.policy_hash, entry.policy_hash)
            and _hex_matches(block.poc_digest, entry.poc_digest)
            and block.action_id == entry.action_id
            and block.eva == entry.eva_result.value
            and block.ekm == entry.ekm_result.value
            and _hex_matches(block.chain_hash, entry.chain_hash)
            and block.certificate == certs.get(entry.chain_hash if entry.ekm_result is EkmResult.LOCKDOWN else "")
        )
        if not ok:
            return ChainVerificationReport(
                False,
                entries_checked=offset,
                first_broken_sequence=entry.sequence,
                reason=f"CSCR block {start + offset} disagrees with the log",
            )
    report.entries_checked = len(blocks)
    return report
