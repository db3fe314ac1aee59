"""Signature scheme, pinned in one place.

Ed25519 (RFC 8032): deterministic, so test vectors can be frozen as golden
files. Keys travel as lowercase hex of their raw 32-byte encodings.
"""

from __future__ import annotations

import os
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

SCHEME = "ed25519"


class SigningFailure(RuntimeError):
    pass


def generate_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def key_from_seed(seed: bytes) -> Ed25519PrivateKey:
    if len(seed) != 32:
        raise ValueError("ed25519 seed must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(seed)


def private_hex(key: Ed25519PrivateKey) -> str:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()).hex()


def public_hex(key: Ed25519PrivateKey) -> str:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw).hex()


def sign(key: Ed25519PrivateKey, payload: bytes) -> str:
    try:
        return key.sign(payload).hex()
    except Exception as exc:  # pragma: no cover - backend failure
        raise SigningFailure(str(exc)) from exc


def verify(public_key: str, signature: str, payload: bytes) -> bool:
    """True iff ``signature`` (hex) verifies over ``payload``; never raises."""
    try:
        pub = Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key))
        pub.verify(bytes.fromhex(signature), payload)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def save_key(key: Ed25519PrivateKey, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(private_hex(key) + "\n")


def load_key(path: str | os.PathLike) -> Ed25519PrivateKey:
    text = Path(path).read_text().strip()
    try:
        return key_from_seed(bytes.fromhex(text))
    except ValueError as exc:
        raise SigningFailure(f"unreadable signing key {path}: {exc}") from exc
