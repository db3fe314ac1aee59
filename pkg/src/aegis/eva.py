"""Action validation against the sealed policy, uncertainty scoring and
runtime integrity (policy-hash drift) checks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .canonical import is_hex32, utc_now
from .iepl import Effect, PolicyDocument, seal
from .errors import MalformedAction

FALLBACK_DENY = "FALLBACK_DENY"
PROHIBITED = "PROHIBITED"


class Origin(str, enum.Enum):
    INTERNAL = "INTERNAL"
    THIRD_PARTY = "THIRD_PARTY"


@dataclass(frozen=True)
class ActionProposal:
    action_id: str
    category: str
    payload_digest: str
    tags: frozenset[str] = frozenset()
    resource: str = ""
    declared_risk: float | None = None
    origin: Origin = Origin.INTERNAL

    def validate(self) -> None:
        if not isinstance(self.action_id, str) or not self.action_id:
            raise MalformedAction("action_id is required")
        if not isinstance(self.category, str) or not self.category:
            raise MalformedAction("category is required")
        if not is_hex32(self.payload_digest):
            raise MalformedAction("payload_digest must be a SHA3-256 hex digest")
        if not isinstance(self.resource, str):
            raise MalformedAction("resource must be a string")
        if self.declared_risk is not None:
            risk = self.declared_risk
            if isinstance(risk, bool) or not isinstance(risk, (int, float)) or not 0 <= risk <= 1:
                raise MalformedAction("declared_risk must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "action_id": self.action_id,
            "category": self.category,
            "tags": sorted(self.tags),
            "resource": self.resource,
            "payload_digest": self.payload_digest,
            "declared_risk": self.declared_risk,
            "origin": self.origin.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ActionProposal:
        if not isinstance(data, Mapping):
            raise MalformedAction("action must be an object")
        try:
            tags = data.get("tags") or []
            if not isinstance(tags, list):
                raise MalformedAction("tags must be a list")
            risk = data.get("declared_risk")
            action = cls(
                action_id=data["action_id"],
                category=data["category"],
                payload_digest=data["payload_digest"],
                tags=frozenset(tags),
                resource=data.get("resource", ""),
                declared_risk=float(risk) if isinstance(risk, (int, float)) and not isinstance(risk, bool) else risk,
                origin=Origin(data.get("origin", "INTERNAL")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedAction(f"bad action: {exc}") from exc
        action.validate()
        return action


@dataclass(frozen=True)
class Verdict:
    compliant: bool
    matched_rule: str
    evaluated_against: str
    effect: Effect | None = None
    uncertainty: float = 0.0

    @property
    def prohibited(self) -> bool:
        return self.matched_rule == PROHIBITED

    @property
    def bit(self) -> int:
        return 1 if self.compliant else 0


Scorer = Callable[[ActionProposal], float]


def constant_scorer(value: float = 0.0) -> Scorer:
    return lambda action: value


def uncertainty(action: ActionProposal, scorer: Scorer | None = None) -> float:
    """Declared risk wins; otherwise the scorer (default: constant 0)."""
    if action.declared_risk is not None:
        return float(action.declared_risk)
    if scorer is None:
        return 0.0
    return min(1.0, max(0.0, float(scorer(action))))


def validate_action(
    action: ActionProposal,
    doc: PolicyDocument,
    *,
    policy_hash: str | None = None,
    scorer: Scorer | None = None,
) -> Verdict:
    action.validate()
    evaluated_against = policy_hash if policy_hash is not None else seal(doc)
    u = uncertainty(action, scorer)
    if action.category in doc.prohibited_operations:
        return Verdict(False, PROHIBITED, evaluated_against, Effect.DENY, u)
    for rule in doc.rules:
        if rule.match.matches(action.category, action.tags, action.resource):
            return Verdict(rule.effect is Effect.ALLOW, rule.rule_id, evaluated_against, rule.effect, u)
    return Verdict(False, FALLBACK_DENY, evaluated_against, Effect.DENY, u)


@dataclass(frozen=True)
class IntegrityReport:
    expected_hash: str
    observed_hash: str
    checked_at: str = field(default_factory=utc_now)

    @property
    def intact(self) -> bool:
        return self.expected_hash == self.observed_hash

    def to_dict(self) -> dict[str, Any]:
        return {
            "expected_hash": self.expected_hash,
            "observed_hash": self.observed_hash,
            "intact": self.intact,
            "checked_at": self.checked_at,
        }


def check_integrity(live_policy: PolicyDocument, lock) -> IntegrityReport:
    """Recompute the live policy's seal and compare it with the trust root."""
    try:
        observed = seal(live_policy)
    except Exception as exc:  # a mangled in-memory policy is drift, not a crash
        observed = "unsealable:" + type(exc).__name__
    return IntegrityReport(expected_hash=lock.policy_hash, observed_hash=observed)
