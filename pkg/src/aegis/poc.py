"""Proof of Conduct: a non-interactive attestation binding one decision to
one sealed policy and one chain position.

The default backend ``attest-v1`` is a commitment (SHA3-256 statement
digest) plus an Ed25519 signature by the unit's runtime key. It is tamper
evident and verifiable from digests and public keys alone. It is NOT a
zero-knowledge proof; other backends can be registered under their own id.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Any, Mapping, Protocol

from . import crypto
from .canonical import canonical_dumps, is_hex32, sha3_hex, utc_now
from .errors import UnknownBackend

DEFAULT_BACKEND = "attest-v1"


@dataclass(frozen=True)
class StatementInputs:
    payload_digest: str
    policy_hash: str
    verdict_bit: int
    matched_rule: str
    prev_chain_hash: str

    def statement_digest(self) -> str:
        for name in ("payload_digest", "policy_hash", "prev_chain_hash"):
            if not is_hex32(getattr(self, name)):
                raise ValueError(f"{name} must be a 32-byte hex digest")
        if self.verdict_bit not in (0, 1):
            raise ValueError("verdict_bit must be 0 or 1")
        rule = self.matched_rule.encode("utf-8")
        h = hashlib.sha3_256()
        h.update(bytes.fromhex(self.payload_digest))
        h.update(bytes.fromhex(self.policy_hash))
        h.update(bytes([self.verdict_bit]))
        h.update(struct.pack(">H", len(rule)))
        h.update(rule)
        h.update(bytes.fromhex(self.prev_chain_hash))
        return h.hexdigest()


@dataclass(frozen=True)
class ProofOfConduct:
    statement_digest: str
    unit_signature: str
    backend_id: str = DEFAULT_BACKEND
    created_at: str = ""

    def digest(self) -> str:
        return sha3_hex(canonical_dumps(self.to_dict()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "statement_digest": self.statement_digest,
            "unit_signature": self.unit_signature,
            "backend_id": self.backend_id,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ProofOfConduct:
        return cls(
            statement_digest=data["statement_digest"],
            unit_signature=data["unit_signature"],
            backend_id=data.get("backend_id", DEFAULT_BACKEND),
            created_at=data.get("created_at", ""),
        )


class ProofBackend(Protocol):
    backend_id: str

    def generate(self, inputs: StatementInputs, signing_key) -> ProofOfConduct: ...

    def verify(self, poc: ProofOfConduct, inputs: StatementInputs, public_key: str) -> bool: ...


class AttestationBackend:
    backend_id = DEFAULT_BACKEND

    def generate(self, inputs: StatementInputs, signing_key) -> ProofOfConduct:
        digest = inputs.statement_digest()
        signature = crypto.sign(signing_key, bytes.fromhex(digest))
        return ProofOfConduct(digest, signature, self.backend_id, utc_now())

    def verify(self, poc: ProofOfConduct, inputs: StatementInputs, public_key: str) -> bool:
        try:
            digest = inputs.statement_digest()
        except ValueError:
            return False
        if digest != poc.statement_digest:
            return False
        return crypto.verify(public_key, poc.unit_signature, bytes.fromhex(digest))


_BACKENDS: dict[str, ProofBackend] = {}


def register_backend(backend: ProofBackend) -> None:
    _BACKENDS[backend.backend_id] = backend


def get_backend(backend_id: str) -> ProofBackend:
    try:
        return _BACKENDS[backend_id]
    except KeyError:
        raise UnknownBackend(f"no proof backend registered as {backend_id!r}") from None


register_backend(AttestationBackend())


def generate_poc(
    inputs: StatementInputs, unit_signing_key, backend_id: str = DEFAULT_BACKEND
) -> ProofOfConduct:
    return get_backend(backend_id).generate(inputs, unit_signing_key)


def verify_poc(poc: ProofOfConduct, expected_inputs: StatementInputs, unit_public_key: str) -> bool:
    return get_backend(poc.backend_id).verify(poc, expected_inputs, unit_public_key)
