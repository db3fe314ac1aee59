"""Shutdown certificates: signed breach evidence sealing a log segment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from . import crypto
from .canonical import canonical_dumps, sha3_hex


@dataclass(frozen=True)
class ShutdownCertificate:
    breach_description: str
    evidence: Mapping[str, Any]
    sealed_log_head: str
    policy_hash_at_breach: str
    issued_at: str
    broadcast_targets: tuple[str, ...] = ()
    unit_signature: str = ""
    site_id: str = ""

    def payload(self) -> bytes:
        body = self.to_dict()
        del body["unit_signature"]
        return canonical_dumps(body)

    def signed(self, unit_signing_key) -> ShutdownCertificate:
        unsigned = ShutdownCertificate(**{**self.__dict__, "unit_signature": ""})
        return ShutdownCertificate(
            **{**unsigned.__dict__, "unit_signature": crypto.sign(unit_signing_key, unsigned.payload())}
        )

    def verify(self, unit_public_key: str) -> bool:
        return crypto.verify(unit_public_key, self.unit_signature, self.payload())

    def digest(self) -> str:
        return sha3_hex(canonical_dumps(self.to_dict()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "breach_description": self.breach_description,
            "evidence": dict(self.evidence),
            "sealed_log_head": self.sealed_log_head,
            "policy_hash_at_breach": self.policy_hash_at_breach,
            "issued_at": self.issued_at,
            "broadcast_targets": list(self.broadcast_targets),
            "site_id": self.site_id,
            "unit_signature": self.unit_signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ShutdownCertificate:
        return cls(
            breach_description=data["breach_description"],
            evidence=dict(data.get("evidence") or {}),
            sealed_log_head=data["sealed_log_head"],
            policy_hash_at_breach=data["policy_hash_at_breach"],
            issued_at=data["issued_at"],
            broadcast_targets=tuple(data.get("broadcast_targets") or ()),
            unit_signature=data.get("unit_signature", ""),
            site_id=data.get("site_id", ""),
        )
