"""Canonical text encoding and digest helpers.

Every hash in the system is taken over bytes produced here, so the encoding
is deliberately narrow: JSON objects with keys sorted by code point, no
insignificant whitespace, UTF-8, integers as integers and non-integral
floats in their shortest round-trip form.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from datetime import datetime, timezone
from typing import Any

ZERO_HASH = "0" * 64

_HEX32 = re.compile(r"[0-9a-f]{64}")


class CanonicalError(ValueError):
    """Value cannot be represented in canonical form."""


def _normalize(value: Any) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CanonicalError(f"non-finite number {value!r}")
        if value.is_integer():
            return int(value)
        return value
    if isinstance(value, dict):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalError(f"object key must be a string, got {key!r}")
            out[key] = _normalize(item)
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize(item) for item in value]
    raise CanonicalError(f"unsupported type {type(value).__name__}")


def canonical_dumps(value: Any) -> bytes:
    """Encode ``value`` to canonical bytes."""
    return json.dumps(
        _normalize(value),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def sha3_hex(data: bytes) -> str:
    return hashlib.sha3_256(data).hexdigest()


def is_hex32(value: Any) -> bool:
    return isinstance(value, str) and _HEX32.fullmatch(value) is not None


def utc_now() -> str:
    """Current UTC instant as ISO-8601 with microseconds and a Z suffix."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def seconds_precision(timestamp: str) -> str:
    """``2025-06-09T03:00:51.123456Z`` -> ``2025-06-09T03:00:51Z``."""
    head = timestamp.rstrip("Z").split(".", 1)[0]
    return head + "Z"
