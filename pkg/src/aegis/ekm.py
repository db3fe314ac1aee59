"""The publish gate.

Every emission goes through :meth:`Gate.publish`, the only code path that
can write a COMMIT record. Per action:

1. integrity: the live policy must still seal to the trust root's hash,
   otherwise a proof challenge against the drifted hash fails and the gate
   locks down;
2. validate and score the action;
3. compliant and ``u < alpha``: prove, log, COMMITTED;
4. otherwise an ordinary DENY/DEFER/risk excess is vetoed and logged, while a
   prohibited operation locks the gate down.

LOCKDOWN is absorbing. Only a quorum-certified redeclaration of the trust
root, verified here, reopens the gate, and the new log segment links to the
sealed head of the old one.
"""

from __future__ import annotations

import dataclasses
import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .canonical import canonical_dumps, is_hex32, sha3_hex, utc_now
from .certificate import ShutdownCertificate
from .errors import BootHalt, RedeclarationInvalid
from .eva import ActionProposal, Scorer, Verdict, check_integrity, validate_action
from .genesis import GenesisLock, HardwareIdentity, verify_genesis
from .iepl import AmendmentProposal, Effect, PolicyDocument, seal
from .ilk import ChainedLogEntry, EkmResult, EvaResult, IlkWriter
from .poc import DEFAULT_BACKEND, StatementInputs, generate_poc, verify_poc
from . import crypto
from .senatus import ValidatorPool, rotate_epoch


class Mode(str, enum.Enum):
    OPERATIONAL = "OPERATIONAL"
    LOCKDOWN = "LOCKDOWN"


class OutcomeKind(str, enum.Enum):
    COMMITTED = "COMMITTED"
    VETOED = "VETOED"
    LOCKDOWN = "LOCKDOWN"
    # egress mediator only: request never reached the gate
    DROPPED = "DROPPED"


class VetoReason(str, enum.Enum):
    NONCOMPLIANT = "NONCOMPLIANT"
    RISK_EXCEEDED = "RISK_EXCEEDED"
    DEFERRED = "DEFERRED"


@dataclass(frozen=True)
class PublishOutcome:
    kind: OutcomeKind
    action_id: str = ""
    chain_hash: str | None = None
    matched_rule: str | None = None
    reason: str | None = None
    certificate: ShutdownCertificate | None = None
    timings: Mapping[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "action_id": self.action_id,
            "chain_hash": self.chain_hash,
            "matched_rule": self.matched_rule,
            "reason": self.reason,
            "certificate": self.certificate.to_dict() if self.certificate else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PublishOutcome:
        cert = data.get("certificate")
        return cls(
            kind=OutcomeKind(data["kind"]),
            action_id=data.get("action_id", ""),
            chain_hash=data.get("chain_hash"),
            matched_rule=data.get("matched_rule"),
            reason=data.get("reason"),
            certificate=ShutdownCertificate.from_dict(cert) if cert else None,
        )


@dataclass(frozen=True)
class GateState:
    mode: Mode
    decisions_count: int
    lockdown_reason: str | None
    current_lock: GenesisLock
    policy_hash: str
    chain_head: str
    pool: ValidatorPool | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "decisions_count": self.decisions_count,
            "lockdown_reason": self.lockdown_reason,
            "policy_hash": self.policy_hash,
            "lock_digest": self.current_lock.digest(),
            "chain_head": self.chain_head,
            "pool": self.pool.to_dict() if self.pool else None,
        }


def _as_hex32(value: str) -> str:
    return value if is_hex32(value) else sha3_hex(value.encode("utf-8"))


class Gate:
    """Serialized publish gate over one live policy, one trust root and one log."""

    def __init__(
        self,
        policy: PolicyDocument,
        lock: GenesisLock,
        hw: HardwareIdentity,
        unit_signing_key,
        ilk: IlkWriter,
        *,
        prior_lock: GenesisLock | None = None,
        trusted_auctor: str | None = None,
        scorer: Scorer | None = None,
        pool: ValidatorPool | None = None,
        decisions_count: int = 0,
        integrity_interval: int = 100,
        charter_probe: Callable[[], str] | None = None,
        broadcast: Callable[[ShutdownCertificate], None] | None = None,
        on_policy_change: Callable[[PolicyDocument, GenesisLock], None] | None = None,
        backend_id: str = DEFAULT_BACKEND,
    ):
        status = verify_genesis(lock, hw, seal(policy), prior=prior_lock, trusted_auctor=trusted_auctor)
        if not status:
            raise BootHalt(status.reason or "unknown")
        self.live_policy = policy
        self.lock = lock
        self.hw = hw
        self._key = unit_signing_key
        self.unit_public_key = crypto.public_hex(unit_signing_key)
        self.ilk = ilk
        self.scorer = scorer
        self.pool = pool
        self.decisions_count = decisions_count
        self.integrity_interval = integrity_interval
        self.charter_probe = charter_probe
        self.broadcast = broadcast
        self.on_policy_change = on_policy_change
        self.backend_id = backend_id
        self._mutex = threading.RLock()
        self.mode = Mode.OPERATIONAL
        self.lockdown_reason: str | None = None
        self.certificate: ShutdownCertificate | None = None
        if ilk.sealed:
            self.mode = Mode.LOCKDOWN
            if ilk.last_certificate:
                self.certificate = ShutdownCertificate.from_dict(ilk.last_certificate)
                self.lockdown_reason = self.certificate.breach_description
            else:
                self.lockdown_reason = "log segment sealed"

    # -- introspection --------------------------------------------------

    @property
    def policy_hash(self) -> str:
        return self.lock.policy_hash

    def state(self) -> GateState:
        with self._mutex:
            return GateState(
                self.mode,
                self.decisions_count,
                self.lockdown_reason,
                self.lock,
                self.lock.policy_hash,
                self.ilk.head,
                self.pool,
            )

    # -- log plumbing ---------------------------------------------------

    def _append(
        self,
        *,
        action_id: str,
        category: str,
        payload_digest: str,
        policy_hash: str,
        verdict_bit: int,
        matched_rule: str,
        eva: EvaResult,
        ekm: EkmResult,
        detail: Mapping[str, Any] | None = None,
    ) -> tuple[ChainedLogEntry, float, float]:
        t0 = time.perf_counter()
        prev = self.ilk.head
        inputs = StatementInputs(payload_digest, policy_hash, verdict_bit, matched_rule, prev)
        poc = generate_poc(inputs, self._key, self.backend_id)
        t1 = time.perf_counter()
        entry = ChainedLogEntry(
            sequence=self.ilk.next_sequence,
            timestamp=utc_now(),
            site_id=self.hw.site_id,
            policy_hash=policy_hash,
            action_id=action_id,
            action_category=category,
            eva_result=eva,
            ekm_result=ekm,
            payload_digest=payload_digest,
            verdict_bit=verdict_bit,
            matched_rule=matched_rule,
            poc=poc,
            prev_chain_hash=prev,
            detail=dict(detail or {}),
        )
        entry = self.ilk.append(entry)
        return entry, t1 - t0, time.perf_counter() - t1

    def _governance(self, kind: str, detail: Mapping[str, Any], policy_hash: str | None = None) -> ChainedLogEntry:
        detail = {"governance": kind, **detail}
        entry, _, _ = self._append(
            action_id=f"governance/{kind}/{self.ilk.entry_total}",
            category=f"governance.{kind}",
            payload_digest=sha3_hex(canonical_dumps(detail)),
            policy_hash=policy_hash or self.lock.policy_hash,
            verdict_bit=1,
            matched_rule=f"GOVERNANCE:{kind}",
            eva=EvaResult.PASS,
            ekm=EkmResult.GOVERN,
            detail=detail,
        )
        return entry

    # -- the publish loop -----------------------------------------------

    def publish(self, action: ActionProposal) -> PublishOutcome:
        action.validate()
        with self._mutex:
            start = time.perf_counter()
            if self.mode is Mode.LOCKDOWN:
                return PublishOutcome(
                    OutcomeKind.LOCKDOWN, action.action_id, reason=self.lockdown_reason, certificate=self.certificate
                )
            timings: dict[str, float] = {}

            breach = self._integrity_breach(action, timings)
            if breach is not None:
                return breach

            t = time.perf_counter()
            verdict = validate_action(action, self.live_policy, policy_hash=self.lock.policy_hash, scorer=self.scorer)
            timings["validate"] = time.perf_counter() - t
            alpha = self.live_policy.risk_threshold_alpha

            if verdict.prohibited:
                return self._lockdown_decision(
                    action,
                    verdict,
                    f"prohibited operation attempted: {action.category}",
                    {"prohibited_category": action.category},
                    timings,
                    start,
                )

            if verdict.compliant and verdict.uncertainty < alpha:
                outcome = self._commit(action, verdict, timings, start)
            else:
                if verdict.compliant:
                    reason = VetoReason.RISK_EXCEEDED
                elif verdict.effect is Effect.DEFER:
                    reason = VetoReason.DEFERRED
                else:
                    reason = VetoReason.NONCOMPLIANT
                entry, prove, append = self._append(
                    action_id=action.action_id,
                    category=action.category,
                    payload_digest=action.payload_digest,
                    policy_hash=verdict.evaluated_against,
                    verdict_bit=verdict.bit,
                    matched_rule=verdict.matched_rule,
                    eva=EvaResult.PASS if verdict.compliant else EvaResult.FAIL,
                    ekm=EkmResult.VETO,
                    detail={"veto_reason": reason.value, "uncertainty": verdict.uncertainty},
                )
                timings.update(prove=prove, append=append, total=time.perf_counter() - start)
                outcome = PublishOutcome(
                    OutcomeKind.VETOED,
                    action.action_id,
                    chain_hash=entry.chain_hash,
                    matched_rule=verdict.matched_rule,
                    reason=reason.value,
                    timings=timings,
                )
            self.decisions_count += 1
            self._maybe_rotate()
            return outcome

    def _commit(self, action: ActionProposal, verdict: Verdict, timings: dict, start: float) -> PublishOutcome:
        prev = self.ilk.head
        inputs = StatementInputs(action.payload_digest, verdict.evaluated_against, 1, verdict.matched_rule, prev)
        t = time.perf_counter()
        poc = generate_poc(inputs, self._key, self.backend_id)
        if not verify_poc(poc, inputs, self.unit_public_key):
            return self._lockdown_decision(
                action, verdict, "proof of conduct failed self-verification",
                {"failed_proof": poc.to_dict()}, timings, start,
            )
        t1 = time.perf_counter()
        entry = ChainedLogEntry(
            sequence=self.ilk.next_sequence,
            timestamp=utc_now(),
            site_id=self.hw.site_id,
            policy_hash=verdict.evaluated_against,
            action_id=action.action_id,
            action_category=action.category,
            eva_result=EvaResult.PASS,
            ekm_result=EkmResult.COMMIT,
            payload_digest=action.payload_digest,
            verdict_bit=1,
            matched_rule=verdict.matched_rule,
            poc=poc,
            prev_chain_hash=prev,
            detail={"uncertainty": verdict.uncertainty},
        )
        entry = self.ilk.append(entry)
        timings.update(prove=t1 - t, append=time.perf_counter() - t1, total=time.perf_counter() - start)
        return PublishOutcome(
            OutcomeKind.COMMITTED,
            action.action_id,
            chain_hash=entry.chain_hash,
            matched_rule=verdict.matched_rule,
            timings=timings,
        )

    def _integrity_breach(self, action: ActionProposal, timings: dict) -> PublishOutcome | None:
        t0 = time.perf_counter()
        report = check_integrity(self.live_policy, self.lock)
        timings["integrity"] = time.perf_counter() - t0
        evidence: dict[str, Any] = {}
        description = None
        observed = report.observed_hash
        if not report.intact:
            description = "live policy hash drifted from the trust root"
            evidence["integrity_report"] = report.to_dict()
        elif self.integrity_interval and self.decisions_count % self.integrity_interval == 0:
            if self.charter_probe is not None:
                on_disk = self.charter_probe()
                if on_disk != self.lock.policy_hash:
                    description = "charter file drifted from the trust root"
                    observed = on_disk
                    evidence["integrity_report"] = {
                        "expected_hash": self.lock.policy_hash,
                        "observed_hash": on_disk,
                        "intact": False,
                        "checked_at": utc_now(),
                        "source": "charter-file",
                    }
            if description is None and self.ilk.disk_tail_head() != self.ilk.head:
                description = "log continuity broken"
                evidence["log_continuity"] = {"expected_head": self.ilk.head, "disk_head": self.ilk.disk_tail_head()}
        if description is None:
            return None
        # proof challenge: what an honest unit attests under the sealed hash
        # must verify against the hash actually in force
        t1 = time.perf_counter()
        challenge = StatementInputs(action.payload_digest, self.lock.policy_hash, 1, "CHALLENGE", self.ilk.head)
        proof = generate_poc(challenge, self._key, self.backend_id)
        drifted = dataclasses.replace(challenge, policy_hash=_as_hex32(observed))
        proof_ok = verify_poc(proof, drifted, self.unit_public_key)
        timings["verification"] = time.perf_counter() - t0
        timings["proof_challenge"] = time.perf_counter() - t1
        evidence["failed_proof"] = {"statement_digest": proof.statement_digest, "verified": proof_ok}
        verdict = Verdict(False, "INTEGRITY_MISMATCH", _as_hex32(observed), None, 0.0)
        return self._lockdown_decision(action, verdict, description, evidence, timings, t0)

    def _lockdown_decision(
        self,
        action: ActionProposal,
        verdict: Verdict,
        description: str,
        evidence: Mapping[str, Any],
        timings: dict,
        start: float,
    ) -> PublishOutcome:
        entry, prove, append = self._append(
            action_id=action.action_id,
            category=action.category,
            payload_digest=action.payload_digest,
            policy_hash=verdict.evaluated_against,
            verdict_bit=0,
            matched_rule=verdict.matched_rule,
            eva=EvaResult.FAIL,
            ekm=EkmResult.LOCKDOWN,
            detail={"breach": description},
        )
        self.decisions_count += 1
        cert = self._seal_and_certify(description, {**evidence, "lockdown_entry": entry.chain_hash},
                                      verdict.evaluated_against)
        timings.update(prove=prove, append=append, total=time.perf_counter() - start)
        return PublishOutcome(
            OutcomeKind.LOCKDOWN,
            action.action_id,
            chain_hash=entry.chain_hash,
            matched_rule=verdict.matched_rule,
            reason=description,
            certificate=cert,
            timings=timings,
        )

    def _seal_and_certify(self, description: str, evidence: Mapping[str, Any], policy_hash: str) -> ShutdownCertificate:
        cert = ShutdownCertificate(
            breach_description=description,
            evidence=dict(evidence),
            sealed_log_head=self.ilk.head,
            policy_hash_at_breach=policy_hash,
            issued_at=utc_now(),
            broadcast_targets=tuple(self.pool.active) if self.pool else (),
            site_id=self.hw.site_id,
        ).signed(self._key)
        self.ilk.seal(self._key, certificate=cert.to_dict())
        self.mode = Mode.LOCKDOWN
        self.lockdown_reason = description
        self.certificate = cert
        if self.broadcast is not None:
            self.broadcast(cert)
        return cert

    def lockdown(self, reason: str, evidence: Mapping[str, Any] | None = None) -> ShutdownCertificate:
        """Enter LOCKDOWN from outside the publish loop. Idempotent."""
        with self._mutex:
            if self.mode is Mode.LOCKDOWN and self.certificate is not None:
                return self.certificate
            evidence = dict(evidence or {})
            observed = check_integrity(self.live_policy, self.lock).observed_hash
            entry, _, _ = self._append(
                action_id=f"lockdown/{self.ilk.entry_total}",
                category="ekm.lockdown",
                payload_digest=sha3_hex(canonical_dumps(evidence)),
                policy_hash=_as_hex32(observed),
                verdict_bit=0,
                matched_rule="LOCKDOWN",
                eva=EvaResult.FAIL,
                ekm=EkmResult.LOCKDOWN,
                detail={"breach": reason},
            )
            return self._seal_and_certify(reason, {**evidence, "lockdown_entry": entry.chain_hash}, _as_hex32(observed))

    # -- governance -------------------------------------------------------

    def _verify_redeclaration(self, new_lock: GenesisLock, new_policy: PolicyDocument) -> None:
        if new_lock.redeclaration_of is None or new_lock.quorum_certificate is None:
            raise RedeclarationInvalid("lock carries no quorum certificate")
        status = verify_genesis(
            new_lock, self.hw, seal(new_policy), prior=self.lock, trusted_auctor=self.lock.auctor_public_key
        )
        if not status:
            raise RedeclarationInvalid(str(status))

    def resume_after_redeclaration(
        self, new_lock: GenesisLock, new_policy: PolicyDocument, proposal: AmendmentProposal | None = None
    ) -> GateState:
        with self._mutex:
            if self.mode is not Mode.LOCKDOWN:
                raise RedeclarationInvalid("gate is not in lockdown")
            self._verify_redeclaration(new_lock, new_policy)
            sealed_head = self.ilk.head
            self.ilk.open_segment()
            self._governance(
                "resume",
                {
                    "sealed_head": sealed_head,
                    "prior_lock": self.lock.digest(),
                    "new_lock": new_lock.digest(),
                    "new_policy_hash": new_lock.policy_hash,
                    "quorum_certificate": new_lock.quorum_certificate.to_dict(),
                    "proposal": proposal.to_dict() if proposal else None,
                    "cleared_certificate": self.certificate.digest() if self.certificate else None,
                },
            )
            self._swap(new_lock, new_policy)
            self.mode = Mode.OPERATIONAL
            self.lockdown_reason = None
            self.certificate = None
            self._maybe_rotate()
            return self.state()

    def adopt_amendment(
        self, new_lock: GenesisLock, new_policy: PolicyDocument, proposal: AmendmentProposal | None = None
    ) -> GateState:
        with self._mutex:
            if self.mode is Mode.LOCKDOWN:
                raise RedeclarationInvalid("gate is locked down; use resume_after_redeclaration")
            self._verify_redeclaration(new_lock, new_policy)
            self._governance(
                "amendment",
                {
                    "prior_lock": self.lock.digest(),
                    "new_lock": new_lock.digest(),
                    "new_policy_hash": new_lock.policy_hash,
                    "quorum_certificate": new_lock.quorum_certificate.to_dict(),
                    "proposal": proposal.to_dict() if proposal else None,
                },
            )
            self._swap(new_lock, new_policy)
            return self.state()

    def apply_redeclaration(
        self, new_lock: GenesisLock, new_policy: PolicyDocument, proposal: AmendmentProposal | None = None
    ) -> GateState:
        with self._mutex:
            if self.mode is Mode.LOCKDOWN:
                return self.resume_after_redeclaration(new_lock, new_policy, proposal)
            return self.adopt_amendment(new_lock, new_policy, proposal)

    def _swap(self, new_lock: GenesisLock, new_policy: PolicyDocument) -> None:
        if self.on_policy_change is not None:
            self.on_policy_change(new_policy, new_lock)
        self.live_policy = new_policy
        self.lock = new_lock

    def _maybe_rotate(self) -> None:
        if self.pool is None or self.mode is Mode.LOCKDOWN:
            return
        cfg = self.live_policy.quorum_config
        if self.decisions_count // cfg.epoch_length > self.pool.epoch:
            old = self.pool
            self.pool = rotate_epoch(old, self.decisions_count, cfg.epoch_length, cfg.n_validators)
            self._governance(
                "rotation",
                {
                    "epoch": self.pool.epoch,
                    "decisions_count": self.decisions_count,
                    "previous_active": list(old.active),
                    "active": list(self.pool.active),
                },
            )
