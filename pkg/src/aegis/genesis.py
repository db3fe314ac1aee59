"""The trust root: hardware identity fused with a sealed policy under the
founding authority's signature, plus quorum-certified redeclaration."""

from __future__ import annotations

import dataclasses
import os
import secrets
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import crypto
from .canonical import canonical_dumps, canonical_loads, sha3_hex, utc_now
from .errors import LineageMismatch, QuorumInsufficient, SigningFailure
from .quorum import QuorumCertificate, check_certificate

SALT_FILE = "hw.salt"
LOCK_FILE = "genesis.lock"


@dataclass(frozen=True)
class HardwareIdentity:
    fingerprint: str

    @property
    def site_id(self) -> str:
        return self.fingerprint[:8]

    @classmethod
    def from_parts(cls, hostname: str, salt: str) -> HardwareIdentity:
        return cls(sha3_hex(canonical_dumps({"hostname": hostname, "salt": salt})))

    @classmethod
    def probe(cls, state_dir: str | os.PathLike, hostname: str | None = None) -> HardwareIdentity:
        """Read the host identity. A missing salt file yields a different
        fingerprint rather than a fresh salt, so deleting it halts boot."""
        salt_path = Path(state_dir) / SALT_FILE
        salt = salt_path.read_text().strip() if salt_path.exists() else ""
        return cls.from_parts(hostname or socket.gethostname(), salt)

    @classmethod
    def provision(cls, state_dir: str | os.PathLike, hostname: str | None = None) -> HardwareIdentity:
        salt_path = Path(state_dir) / SALT_FILE
        if not salt_path.exists():
            salt_path.parent.mkdir(parents=True, exist_ok=True)
            salt_path.write_text(secrets.token_hex(32) + "\n")
        return cls.probe(state_dir, hostname)


@dataclass(frozen=True)
class GenesisLock:
    fingerprint: str
    policy_hash: str
    auctor_public_key: str
    declaration_timestamp: str
    validators: Mapping[str, str] = field(default_factory=dict)
    quorum_q: int = 3
    redeclaration_of: str | None = None
    quorum_certificate: QuorumCertificate | None = None
    auctor_signature: str = ""

    @property
    def site_id(self) -> str:
        return self.fingerprint[:8]

    def signed_payload(self) -> bytes:
        body = self.to_dict()
        del body["auctor_signature"]
        return canonical_dumps(body)

    def digest(self) -> str:
        return sha3_hex(canonical_dumps(self.to_dict()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "fingerprint": self.fingerprint,
            "site_id": self.site_id,
            "policy_hash": self.policy_hash,
            "auctor_public_key": self.auctor_public_key,
            "declaration_timestamp": self.declaration_timestamp,
            "validators": dict(self.validators),
            "quorum_q": self.quorum_q,
            "redeclaration_of": self.redeclaration_of,
            "quorum_certificate": self.quorum_certificate.to_dict() if self.quorum_certificate else None,
            "auctor_signature": self.auctor_signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenesisLock:
        cert = data.get("quorum_certificate")
        return cls(
            fingerprint=data["fingerprint"],
            policy_hash=data["policy_hash"],
            auctor_public_key=data["auctor_public_key"],
            declaration_timestamp=data["declaration_timestamp"],
            validators=dict(data.get("validators") or {}),
            quorum_q=data.get("quorum_q", 3),
            redeclaration_of=data.get("redeclaration_of"),
            quorum_certificate=QuorumCertificate.from_dict(cert) if cert else None,
            auctor_signature=data.get("auctor_signature", ""),
        )

    def dumps(self) -> bytes:
        return canonical_dumps(self.to_dict())

    @classmethod
    def loads(cls, data: bytes | str) -> GenesisLock:
        return cls.from_dict(canonical_loads(data))


@dataclass(frozen=True)
class GenesisStatus:
    verified: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.verified

    def __str__(self) -> str:
        return "VERIFIED" if self.verified else f"HALT({self.reason})"


VERIFIED = GenesisStatus(True)


def halt(reason: str) -> GenesisStatus:
    return GenesisStatus(False, reason)


def sign_lock(lock: GenesisLock, auctor_key) -> GenesisLock:
    unsigned = dataclasses.replace(lock, auctor_signature="")
    return dataclasses.replace(unsigned, auctor_signature=crypto.sign(auctor_key, unsigned.signed_payload()))


def declare_genesis(
    hw: HardwareIdentity,
    policy_hash: str,
    auctor_signing_key,
    validators: Mapping[str, str] | None = None,
    quorum_q: int = 3,
    *,
    expected_auctor: str | None = None,
    timestamp: str | None = None,
) -> GenesisLock:
    if expected_auctor is not None and crypto.public_hex(auctor_signing_key) != expected_auctor:
        raise SigningFailure("signing key is not the configured founding authority")
    lock = GenesisLock(
        fingerprint=hw.fingerprint,
        policy_hash=policy_hash,
        auctor_public_key=crypto.public_hex(auctor_signing_key),
        declaration_timestamp=timestamp or utc_now(),
        validators=dict(validators or {}),
        quorum_q=quorum_q,
    )
    return sign_lock(lock, auctor_signing_key)


def verify_genesis(
    lock: GenesisLock,
    current_hw: HardwareIdentity,
    current_policy_hash: str,
    *,
    prior: GenesisLock | None = None,
    trusted_auctor: str | None = None,
) -> GenesisStatus:
    """Total check run at every boot; any failure names the first broken anchor.

    ``prior`` is the lock this one redeclares (when available); ``trusted_auctor``
    pins the founding authority's key independently of the lock contents.
    """
    try:
        if not crypto.verify(lock.auctor_public_key, lock.auctor_signature, lock.signed_payload()):
            return halt("InvalidSignature")
    except Exception:
        return halt("InvalidSignature")
    if trusted_auctor is not None and lock.auctor_public_key != trusted_auctor:
        return halt("UntrustedAuctor")
    if lock.fingerprint != current_hw.fingerprint:
        return halt("HardwareMismatch")
    if lock.policy_hash != current_policy_hash:
        return halt("PolicyHashMismatch")
    if (lock.redeclaration_of is None) != (lock.quorum_certificate is None):
        return halt("RedeclarationIncomplete")
    if lock.quorum_certificate is not None:
        cert = lock.quorum_certificate
        if cert.new_hash != lock.policy_hash:
            return halt("CertificateMismatch")
        if prior is not None:
            if prior.digest() != lock.redeclaration_of or cert.base_hash != prior.policy_hash:
                return halt("LineageMismatch")
            if dict(prior.validators) != dict(lock.validators) or prior.quorum_q != lock.quorum_q:
                return halt("AuthorizationChainChanged")
        if check_certificate(cert, lock.validators, lock.quorum_q) is not None:
            return halt("QuorumInsufficient")
    return VERIFIED


def redeclare(
    prior: GenesisLock,
    new_policy_hash: str,
    cert: QuorumCertificate,
    auctor_signing_key,
    *,
    timestamp: str | None = None,
) -> GenesisLock:
    if crypto.public_hex(auctor_signing_key) != prior.auctor_public_key:
        raise SigningFailure("redeclaration must be signed by the founding authority")
    if cert.base_hash != prior.policy_hash:
        raise LineageMismatch(
            f"certificate base {cert.base_hash[:16]} != lock policy {prior.policy_hash[:16]}"
        )
    if cert.new_hash != new_policy_hash:
        raise LineageMismatch("certificate does not certify the new policy hash")
    problem = check_certificate(cert, prior.validators, prior.quorum_q)
    if problem is not None:
        raise QuorumInsufficient(problem)
    lock = GenesisLock(
        fingerprint=prior.fingerprint,
        policy_hash=new_policy_hash,
        auctor_public_key=prior.auctor_public_key,
        declaration_timestamp=timestamp or utc_now(),
        validators=dict(prior.validators),
        quorum_q=prior.quorum_q,
        redeclaration_of=prior.digest(),
        quorum_certificate=cert,
    )
    return sign_lock(lock, auctor_signing_key)


def walk_redeclarations(lock: GenesisLock, history: Mapping[str, GenesisLock]) -> list[GenesisLock]:
    """Follow ``redeclaration_of`` back to the genesis declaration (newest first)."""
    chain = [lock]
    seen = {lock.digest()}
    while chain[-1].redeclaration_of is not None:
        parent = history.get(chain[-1].redeclaration_of)
        if parent is None or parent.digest() in seen:
            raise LineageMismatch("redeclaration chain is broken")
        seen.add(parent.digest())
        chain.append(parent)
    return chain

