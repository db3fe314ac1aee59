"""Egress mediation for third-party emissions.

Every emission must carry an attestation: the submitting client's signature
over the canonical action together with the policy hash the client believes
is in force. Unattested, mis-signed or stale-hash traffic is dropped and
counted. ``threshold`` consecutive drops lock the gate down.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Mapping

from . import crypto
from .canonical import canonical_dumps
from .ekm import Gate, OutcomeKind, PublishOutcome
from .eva import ActionProposal

DEFAULT_THRESHOLD = 3


@dataclass(frozen=True)
class Attestation:
    client_id: str
    policy_hash: str
    signature: str

    def to_dict(self) -> dict[str, Any]:
        return {"client_id": self.client_id, "policy_hash": self.policy_hash, "signature": self.signature}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> Attestation | None:
        if not data:
            return None
        return cls(str(data.get("client_id", "")), str(data.get("policy_hash", "")), str(data.get("signature", "")))


def attestation_payload(action: ActionProposal, policy_hash: str) -> bytes:
    return canonical_dumps({"action": action.to_dict(), "policy_hash": policy_hash})


def attest(action: ActionProposal, policy_hash: str, client_id: str, client_key) -> Attestation:
    return Attestation(client_id, policy_hash, crypto.sign(client_key, attestation_payload(action, policy_hash)))


class EgressMediator:
    def __init__(self, gate: Gate, client_keys: Mapping[str, str], threshold: int = DEFAULT_THRESHOLD):
        self.gate = gate
        self.client_keys = dict(client_keys)
        self.threshold = threshold
        self.dropped = 0
        self.consecutive_dropped = 0
        self._mutex = threading.Lock()

    def _drop_reason(self, action: ActionProposal, attestation: Attestation | None) -> str | None:
        if attestation is None:
            return "missing attestation"
        key = self.client_keys.get(attestation.client_id)
        if key is None:
            return f"unknown client {attestation.client_id!r}"
        if not crypto.verify(key, attestation.signature, attestation_payload(action, attestation.policy_hash)):
            return "bad request signature"
        if attestation.policy_hash != self.gate.policy_hash:
            return "stale policy hash"
        return None

    def mediate_egress(self, emission: ActionProposal, attestation: Attestation | None) -> PublishOutcome:
        with self._mutex:
            reason = self._drop_reason(emission, attestation)
            if reason is None:
                self.consecutive_dropped = 0
                return self.gate.publish(emission)
            self.dropped += 1
            self.consecutive_dropped += 1
            if self.consecutive_dropped >= self.threshold:
                cert = self.gate.lockdown(
                    "non-attested traffic threshold reached",
                    {"dropped_total": self.dropped, "consecutive": self.consecutive_dropped, "last_reason": reason},
                )
                return PublishOutcome(OutcomeKind.LOCKDOWN, emission.action_id, reason=reason, certificate=cert)
            return PublishOutcome(OutcomeKind.DROPPED, emission.action_id, reason=reason)
