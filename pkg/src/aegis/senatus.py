"""Quorum amendment protocol.

Validators are in-process state machines that talk to the proposer through
durable inbox directories. Delivery is at-least-once (a lossy simulated
network retries) and handling is idempotent: ballots are deduplicated by
``(validator_id, proposal_id)``. The quorum threshold is absolute, so a
recusal never lowers the number of approvals required.
"""

from __future__ import annotations

import enum
import itertools
import os
import random
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import crypto
from .canonical import canonical_dumps, canonical_loads, utc_now
from .errors import (
    AegisError,
    BaseHashMismatch,
    DuplicateVote,
    ImmutableFieldEdit,
    LineageMismatch,
    MalformedDocument,
    RedeclarationInvalid,
    RosterTooSmall,
    StalePool,
)
from .genesis import GenesisLock, HardwareIdentity, redeclare, verify_genesis
from .iepl import (
    MEMBERSHIP_OPS,
    AmendmentProposal,
    PolicyDocument,
    QuorumConfig,
    apply_amendment,
    seal,
)
from .quorum import Decision, QuorumCertificate, Vote


class BehaviorKind(str, enum.Enum):
    HONEST = "HONEST"
    BYZANTINE = "BYZANTINE"
    CRASHED = "CRASHED"


# byzantine scripts: what a faulty validator says regardless of the proposal
BYZANTINE_SCRIPTS = ("approve_all", "reject_all", "recuse_all", "flip", "random")


@dataclass(frozen=True)
class Behavior:
    kind: BehaviorKind = BehaviorKind.HONEST
    script: str | None = None
    seed: int = 0

    @classmethod
    def parse(cls, value: str | Mapping[str, Any] | None) -> Behavior:
        if value is None:
            return cls()
        if isinstance(value, str):
            value = {"kind": value}
        kind = BehaviorKind(str(value.get("kind", "HONEST")).upper())
        script = value.get("script")
        if kind is BehaviorKind.BYZANTINE and script not in BYZANTINE_SCRIPTS:
            raise ValueError(f"byzantine script must be one of {BYZANTINE_SCRIPTS}")
        return cls(kind, script, int(value.get("seed", 0)))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "script": self.script, "seed": self.seed}


HONEST = Behavior()


class Inbox:
    """Directory-backed message queue; each message is one file written atomically."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._counter = itertools.count()

    def put(self, message: Mapping[str, Any]) -> Path:
        name = f"{os.getpid()}-{next(self._counter):08d}-{uuid.uuid4().hex[:8]}.msg"
        tmp = self.path / (name + ".tmp")
        tmp.write_bytes(canonical_dumps(message))
        final = self.path / name
        os.replace(tmp, final)
        return final

    def peek(self) -> list[dict[str, Any]]:
        return [canonical_loads(p.read_bytes()) for p in sorted(self.path.glob("*.msg"))]

    def drain(self) -> list[dict[str, Any]]:
        out = []
        for p in sorted(self.path.glob("*.msg")):
            out.append(canonical_loads(p.read_bytes()))
            p.unlink()
        return out


@dataclass
class SimulatedNetwork:
    """Lossy link with retry. ``duplicate_rate`` re-delivers a message that already arrived."""

    loss_rate: float = 0.0
    duplicate_rate: float = 0.0
    seed: int = 0
    max_attempts: int = 50
    attempts: int = 0
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def deliver(self, inbox: Inbox, message: Mapping[str, Any]) -> bool:
        for _ in range(self.max_attempts):
            self.attempts += 1
            if self._rng.random() < self.loss_rate:
                continue
            inbox.put(message)
            if self._rng.random() < self.duplicate_rate:
                inbox.put(message)
            return True
        return False


# names of the constitutional checks an honest validator applies
DEFAULT_CHECKS = frozenset({"base_hash", "evolvable_only", "no_prohibition_removal"})


@dataclass
class ValidatorAgent:
    validator_id: str
    signing_key: Any
    behavior: Behavior = HONEST
    inbox: Inbox | None = None
    constitutional_params: frozenset[str] = DEFAULT_CHECKS

    @property
    def public_key(self) -> str:
        return crypto.public_hex(self.signing_key)


@dataclass(frozen=True)
class ValidatorPool:
    roster: tuple[str, ...]
    active: tuple[str, ...]
    epoch: int = 0
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"roster": list(self.roster), "active": list(self.active), "epoch": self.epoch, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ValidatorPool:
        return cls(tuple(data["roster"]), tuple(data["active"]), data.get("epoch", 0), data.get("seed", 0))


def _draw_active(roster: tuple[str, ...], n_active: int, seed: int, epoch: int) -> tuple[str, ...]:
    if len(roster) < n_active:
        raise RosterTooSmall(f"roster has {len(roster)} validators, need {n_active}")
    rng = random.Random(f"{seed}:{epoch}")
    return tuple(sorted(rng.sample(sorted(roster), n_active)))


def initial_pool(roster: Iterable[str], n_active: int = 5, seed: int = 0) -> ValidatorPool:
    roster = tuple(sorted(roster))
    return ValidatorPool(roster, _draw_active(roster, n_active, seed, 0), 0, seed)


def pool_for_epoch(roster: Iterable[str], n_active: int, seed: int, epoch: int) -> ValidatorPool:
    roster = tuple(sorted(roster))
    return ValidatorPool(roster, _draw_active(roster, n_active, seed, epoch), epoch, seed)


def rotate_epoch(pool: ValidatorPool, decisions_count: int, epoch_length: int, n_active: int = 5) -> ValidatorPool:
    """Draw the active pool for the epoch that ``decisions_count`` has entered."""
    epoch = decisions_count // epoch_length
    if epoch <= pool.epoch:
        raise ValueError(f"decision {decisions_count} has not crossed out of epoch {pool.epoch}")
    return ValidatorPool(pool.roster, _draw_active(pool.roster, n_active, pool.seed, epoch), epoch, pool.seed)


# --- voting ----------------------------------------------------------------


def _touches_membership(proposal: AmendmentProposal, validator_id: str) -> bool:
    return any(e.op in MEMBERSHIP_OPS and e.target == validator_id for e in proposal.edits)


def honest_decision(
    proposal: AmendmentProposal,
    current_doc: PolicyDocument,
    validator_id: str = "",
    checks: frozenset[str] | None = None,
) -> tuple[Decision, str]:
    """Decision an honest validator reaches, plus the hash it expects after passage."""
    checks = DEFAULT_CHECKS if checks is None else checks
    if validator_id and _touches_membership(proposal, validator_id):
        return Decision.RECUSE, ""
    if "base_hash" in checks and proposal.base_hash != seal(current_doc):
        return Decision.REJECT, ""
    if "evolvable_only" in checks and not all(e.evolvable for e in proposal.edits):
        return Decision.REJECT, ""
    if "no_prohibition_removal" in checks and any(
        e.op == "remove_prohibited" and e.value in current_doc.prohibited_operations for e in proposal.edits
    ):
        return Decision.REJECT, ""
    try:
        new_doc = apply_amendment(current_doc, proposal)
    except (BaseHashMismatch, ImmutableFieldEdit, MalformedDocument):
        return Decision.REJECT, ""
    return Decision.APPROVE, seal(new_doc)


def evaluate_proposal(
    validator: ValidatorAgent,
    proposal: AmendmentProposal,
    current_doc: PolicyDocument,
    pool: ValidatorPool | None = None,
) -> Vote | None:
    """Signed vote of ``validator``; ``None`` for a crashed validator."""
    if pool is not None and validator.validator_id not in pool.active:
        raise StalePool(f"{validator.validator_id} is not active in epoch {pool.epoch}")
    behavior = validator.behavior
    if behavior.kind is BehaviorKind.CRASHED:
        return None
    decision, new_hash = honest_decision(
        proposal, current_doc, validator.validator_id, validator.constitutional_params
    )
    if behavior.kind is BehaviorKind.BYZANTINE:
        if not new_hash:
            try:
                new_hash = seal(apply_amendment(current_doc, proposal))
            except AegisError:
                new_hash = ""
        script = behavior.script
        if script == "approve_all":
            decision = Decision.APPROVE
        elif script == "reject_all":
            decision = Decision.REJECT
        elif script == "recuse_all":
            decision = Decision.RECUSE
        elif script == "flip":
            decision = Decision.REJECT if decision is Decision.APPROVE else Decision.APPROVE
        else:
            rng = random.Random(f"{behavior.seed}:{validator.validator_id}:{proposal.proposal_id}")
            decision = rng.choice(list(Decision))
    vote = Vote(validator.validator_id, proposal.proposal_id, decision, proposal.base_hash, new_hash)
    return vote.signed(validator.signing_key)


@dataclass(frozen=True)
class TallyResult:
    passed: bool
    certificate: QuorumCertificate | None
    counts: Mapping[str, int]
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "result": "PASSED" if self.passed else "REJECTED",
            "reason": self.reason,
            "counts": dict(self.counts),
            "certificate": self.certificate.to_dict() if self.certificate else None,
        }


def tally(
    votes: Iterable[Vote],
    config: QuorumConfig,
    validator_keys: Mapping[str, str],
    *,
    new_hash: str | None = None,
) -> TallyResult:
    """Count valid APPROVE votes against the absolute threshold ``q``.

    Votes with bad signatures, unknown validators, or a different
    proposal/base/new hash than the rest are discarded before counting.
    """
    by_validator: dict[str, Vote] = {}
    for vote in votes:
        seen = by_validator.get(vote.validator_id)
        if seen is not None and seen != vote:
            raise DuplicateVote(f"{vote.validator_id} voted twice on {vote.proposal_id}")
        by_validator[vote.validator_id] = vote

    counts = Counter({"APPROVE": 0, "REJECT": 0, "RECUSE": 0, "invalid": 0})
    proposals = {(v.proposal_id, v.base_hash) for v in by_validator.values()}
    if len(proposals) > 1:
        raise ValueError("votes reference different proposals")
    if new_hash is None:
        approving = Counter(v.new_hash for v in by_validator.values() if v.decision is Decision.APPROVE)
        new_hash = approving.most_common(1)[0][0] if approving else ""

    valid: list[Vote] = []
    for vote in by_validator.values():
        key = validator_keys.get(vote.validator_id)
        if key is None or not vote.verify(key):
            counts["invalid"] += 1
            continue
        if vote.decision is Decision.APPROVE and vote.new_hash != new_hash:
            counts["invalid"] += 1
            continue
        counts[vote.decision.value] += 1
        if vote.decision is Decision.APPROVE:
            valid.append(vote)

    if counts["APPROVE"] >= config.quorum_q and proposals:
        proposal_id, base_hash = next(iter(proposals))
        cert = QuorumCertificate(
            proposal_id,
            base_hash,
            new_hash,
            tuple(sorted(valid, key=lambda v: v.validator_id)),
            utc_now(),
        )
        return TallyResult(True, cert, dict(counts))
    return TallyResult(
        False,
        None,
        dict(counts),
        f"{counts['APPROVE']} valid approvals < q={config.quorum_q}",
    )


# --- orchestration -----------------------------------------------------------


class Senatus:
    """Drives one round of voting over inboxes for a proposal."""

    def __init__(
        self,
        validators: Mapping[str, ValidatorAgent],
        pool: ValidatorPool,
        config: QuorumConfig,
        ballot_box: Inbox,
        network: SimulatedNetwork | None = None,
    ):
        self.validators = dict(validators)
        self.pool = pool
        self.config = config
        self.ballot_box = ballot_box
        self.network = network or SimulatedNetwork()

    @property
    def keys(self) -> dict[str, str]:
        return {vid: v.public_key for vid, v in self.validators.items()}

    def run_votes(self, proposal: AmendmentProposal, current_doc: PolicyDocument) -> tuple[TallyResult, list[Vote]]:
        message = {"type": "proposal", "proposal": proposal.to_dict(), "base_doc": current_doc.to_dict()}
        for vid in self.pool.active:
            agent = self.validators[vid]
            if agent.inbox is not None:
                self.network.deliver(agent.inbox, message)

        for vid in self.pool.active:
            agent = self.validators[vid]
            if agent.inbox is None:
                continue
            handled: set[str] = set()
            for msg in agent.inbox.drain():
                if msg.get("type") != "proposal":
                    continue
                prop = AmendmentProposal.from_dict(msg["proposal"])
                if prop.proposal_id in handled:
                    continue
                handled.add(prop.proposal_id)
                vote = evaluate_proposal(agent, prop, PolicyDocument.from_dict(msg["base_doc"]), self.pool)
                if vote is not None:
                    self.network.deliver(self.ballot_box, {"type": "vote", "vote": vote.to_dict()})

        ballots: dict[tuple[str, str], Vote] = {}
        for msg in self.ballot_box.drain():
            if msg.get("type") != "vote":
                continue
            vote = Vote.from_dict(msg["vote"])
            if vote.proposal_id == proposal.proposal_id:
                ballots.setdefault((vote.validator_id, vote.proposal_id), vote)
        votes = list(ballots.values())
        try:
            expected = seal(apply_amendment(current_doc, proposal))
        except AegisError:
            expected = None
        if expected is None:
            counts = Counter(v.decision.value for v in votes)
            return TallyResult(False, None, dict(counts), "proposal cannot be applied"), votes
        return tally(votes, self.config, self.keys, new_hash=expected), votes


def execute_passage(
    cert: QuorumCertificate,
    proposal: AmendmentProposal,
    current_doc: PolicyDocument,
    lock: GenesisLock,
    *,
    hw: HardwareIdentity,
    auctor_signing_key,
    gate=None,
) -> tuple[PolicyDocument, GenesisLock]:
    """Apply, reseal, redeclare and verify; on any failure the old policy stays live.

    With a ``gate``, the new lock is handed over (which resumes a locked-down
    gate) and the transition is logged before the new policy takes effect.
    """
    if cert.proposal_id != proposal.proposal_id:
        raise LineageMismatch("certificate is for a different proposal")
    new_doc = apply_amendment(current_doc, proposal)
    new_hash = seal(new_doc)
    if cert.new_hash != new_hash:
        raise LineageMismatch("certificate does not certify the amended policy")
    new_lock = redeclare(lock, new_hash, cert, auctor_signing_key)
    status = verify_genesis(new_lock, hw, new_hash, prior=lock)
    if not status:
        raise RedeclarationInvalid(f"redeclared lock failed verification: {status}")
    if gate is not None:
        gate.apply_redeclaration(new_lock, new_doc, proposal)
    return new_doc, new_lock
