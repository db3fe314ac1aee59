"""Votes and quorum certificates.

Kept apart from the senatus protocol because the trust root has to verify
certificates without pulling in validator machinery.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Mapping

from . import crypto
from .canonical import canonical_dumps


class Decision(str, enum.Enum):
    APPROVE = "APPROVE"
    REJECT = "REJECT"
    RECUSE = "RECUSE"


@dataclass(frozen=True)
class Vote:
    validator_id: str
    proposal_id: str
    decision: Decision
    base_hash: str
    new_hash: str
    signature: str = ""

    def payload(self) -> bytes:
        return canonical_dumps(
            {
                "validator_id": self.validator_id,
                "proposal_id": self.proposal_id,
                "decision": self.decision.value,
                "base_hash": self.base_hash,
                "new_hash": self.new_hash,
            }
        )

    def signed(self, key) -> Vote:
        return Vote(
            self.validator_id,
            self.proposal_id,
            self.decision,
            self.base_hash,
            self.new_hash,
            crypto.sign(key, self.payload()),
        )

    def verify(self, public_key: str) -> bool:
        return crypto.verify(public_key, self.signature, self.payload())

    def to_dict(self) -> dict[str, Any]:
        return {
            "validator_id": self.validator_id,
            "proposal_id": self.proposal_id,
            "decision": self.decision.value,
            "base_hash": self.base_hash,
            "new_hash": self.new_hash,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Vote:
        return cls(
            validator_id=data["validator_id"],
            proposal_id=data["proposal_id"],
            decision=Decision(data["decision"]),
            base_hash=data["base_hash"],
            new_hash=data.get("new_hash", ""),
            signature=data.get("signature", ""),
        )


@dataclass(frozen=True)
class QuorumCertificate:
    proposal_id: str
    base_hash: str
    new_hash: str
    approving_votes: tuple[Vote, ...]
    issued_at: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "base_hash": self.base_hash,
            "new_hash": self.new_hash,
            "approving_votes": [v.to_dict() for v in self.approving_votes],
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> QuorumCertificate:
        return cls(
            proposal_id=data["proposal_id"],
            base_hash=data["base_hash"],
            new_hash=data["new_hash"],
            approving_votes=tuple(Vote.from_dict(v) for v in data.get("approving_votes", [])),
            issued_at=data.get("issued_at", ""),
        )


def valid_approvals(cert: QuorumCertificate, validators: Mapping[str, str]) -> set[str]:
    """Validator ids whose APPROVE votes in ``cert`` are well-formed and correctly signed."""
    approvers: set[str] = set()
    for vote in cert.approving_votes:
        if vote.decision is not Decision.APPROVE:
            continue
        if (vote.proposal_id, vote.base_hash, vote.new_hash) != (
            cert.proposal_id,
            cert.base_hash,
            cert.new_hash,
        ):
            continue
        key = validators.get(vote.validator_id)
        if key is None or not vote.verify(key):
            continue
        approvers.add(vote.validator_id)
    return approvers


def check_certificate(
    cert: QuorumCertificate, validators: Mapping[str, str], quorum_q: int
) -> str | None:
    """Return ``None`` if the certificate carries a quorum, else a failure reason."""
    count = len(valid_approvals(cert, validators))
    if count < quorum_q:
        return f"QuorumInsufficient: {count} valid approvals < q={quorum_q}"
    return None
