"""Policy documents: model, canonical encoding, sealing and amendment.

A charter is an ordered rule list evaluated first-match-wins, a set of
prohibited operation categories, the risk threshold alpha used by the
publish gate, and the quorum configuration that governs amendment. Sealing
is SHA3-256 over the canonical encoding.
"""

from __future__ import annotations

import dataclasses
import enum
import fnmatch
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .canonical import CanonicalError, canonical_dumps, canonical_loads, is_hex32, sha3_hex
from .errors import BaseHashMismatch, ImmutableFieldEdit, MalformedDocument

DEFAULT_ALPHA = 0.2
CHARTER_SUFFIX = ".iepl"


class Effect(str, enum.Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"
    DEFER = "DEFER"


@dataclass(frozen=True)
class RuleMatch:
    """Predicate over an action proposal. ``None``/empty fields match anything."""

    category: str | None = None
    tags: frozenset[str] = frozenset()
    resource: str | None = None

    def matches(self, category: str, tags: Iterable[str], resource: str) -> bool:
        if self.category is not None and self.category != category:
            return False
        if self.tags and not self.tags <= set(tags):
            return False
        if self.resource is not None and not fnmatch.fnmatchcase(resource, self.resource):
            return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return {"category": self.category, "tags": sorted(self.tags), "resource": self.resource}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RuleMatch:
        category = data.get("category")
        resource = data.get("resource")
        tags = data.get("tags") or []
        if category is not None and not isinstance(category, str):
            raise MalformedDocument("match.category must be a string or null")
        if resource is not None and not isinstance(resource, str):
            raise MalformedDocument("match.resource must be a string or null")
        if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
            raise MalformedDocument("match.tags must be a list of strings")
        return cls(category=category, tags=frozenset(tags), resource=resource)


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    match: RuleMatch
    effect: Effect
    # "ethical weighting": evolvable, carried for audit, no effect on evaluation
    weight: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "match": self.match.to_dict(),
            "effect": self.effect.value,
            "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PolicyRule:
        if not isinstance(data, Mapping):
            raise MalformedDocument("rule must be an object")
        rule_id = data.get("rule_id")
        if not isinstance(rule_id, str) or not rule_id:
            raise MalformedDocument("rule_id must be a non-empty string")
        try:
            effect = Effect(data.get("effect"))
        except ValueError:
            raise MalformedDocument(f"rule {rule_id}: effect must be ALLOW, DENY or DEFER") from None
        weight = data.get("weight", 1.0)
        if isinstance(weight, bool) or not isinstance(weight, (int, float)):
            raise MalformedDocument(f"rule {rule_id}: weight must be a number")
        return cls(rule_id, RuleMatch.from_dict(data.get("match") or {}), effect, float(weight))


@dataclass(frozen=True)
class QuorumConfig:
    n_validators: int = 5
    quorum_q: int = 3
    epoch_length: int = 10_000

    @property
    def byzantine_bound_f(self) -> int:
        return (self.n_validators - 1) // 3

    def validate(self) -> None:
        for name in ("n_validators", "quorum_q", "epoch_length"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise MalformedDocument(f"quorum_config.{name} must be a positive integer")
        if self.quorum_q > self.n_validators:
            raise MalformedDocument("quorum_q must not exceed n_validators")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_validators": self.n_validators,
            "quorum_q": self.quorum_q,
            "epoch_length": self.epoch_length,
            "byzantine_bound_f": self.byzantine_bound_f,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> QuorumConfig:
        cfg = cls(
            n_validators=data.get("n_validators", 5),
            quorum_q=data.get("quorum_q", 3),
            epoch_length=data.get("epoch_length", 10_000),
        )
        cfg.validate()
        stored_f = data.get("byzantine_bound_f", cfg.byzantine_bound_f)
        if stored_f != cfg.byzantine_bound_f:
            raise MalformedDocument(
                f"byzantine_bound_f={stored_f} but floor((N-1)/3)={cfg.byzantine_bound_f}"
            )
        return cfg


@dataclass(frozen=True)
class PolicyDocument:
    charter_id: str
    rules: tuple[PolicyRule, ...]
    prohibited_operations: frozenset[str] = frozenset()
    risk_threshold_alpha: float = DEFAULT_ALPHA
    quorum_config: QuorumConfig = field(default_factory=QuorumConfig)
    version: int = 1
    lineage: tuple[str, ...] = ()

    def validate(self) -> None:
        if not isinstance(self.charter_id, str) or not self.charter_id:
            raise MalformedDocument("charter_id must be a non-empty string")
        if not self.rules:
            raise MalformedDocument("rules must be non-empty")
        seen: set[str] = set()
        for rule in self.rules:
            if rule.rule_id in seen:
                raise MalformedDocument(f"duplicate rule_id {rule.rule_id!r}")
            seen.add(rule.rule_id)
            if not isinstance(rule.effect, Effect):
                raise MalformedDocument(f"rule {rule.rule_id}: bad effect")
        alpha = self.risk_threshold_alpha
        if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not 0 <= alpha <= 1:
            raise MalformedDocument("risk_threshold_alpha must be in [0, 1]")
        self.quorum_config.validate()
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise MalformedDocument("version must be an integer >= 1")
        if len(self.lineage) != self.version - 1:
            raise MalformedDocument(
                f"lineage has {len(self.lineage)} entries, version {self.version} needs {self.version - 1}"
            )
        if not all(is_hex32(h) for h in self.lineage):
            raise MalformedDocument("lineage entries must be 64 lowercase hex chars")

    def rule(self, rule_id: str) -> PolicyRule:
        for rule in self.rules:
            if rule.rule_id == rule_id:
                return rule
        raise KeyError(rule_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "charter_id": self.charter_id,
            "version": self.version,
            "rules": [r.to_dict() for r in self.rules],
            "prohibited_operations": sorted(self.prohibited_operations),
            "risk_threshold_alpha": self.risk_threshold_alpha,
            "quorum_config": self.quorum_config.to_dict(),
            "lineage": list(self.lineage),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PolicyDocument:
        if not isinstance(data, Mapping):
            raise MalformedDocument("policy document must be an object")
        rules = data.get("rules")
        if not isinstance(rules, list):
            raise MalformedDocument("rules must be a list")
        prohibited = data.get("prohibited_operations") or []
        if not isinstance(prohibited, list) or not all(isinstance(p, str) for p in prohibited):
            raise MalformedDocument("prohibited_operations must be a list of strings")
        lineage = data.get("lineage") or []
        if not isinstance(lineage, list):
            raise MalformedDocument("lineage must be a list")
        alpha = data.get("risk_threshold_alpha", DEFAULT_ALPHA)
        if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
            raise MalformedDocument("risk_threshold_alpha must be a number")
        doc = cls(
            charter_id=data.get("charter_id"),
            rules=tuple(PolicyRule.from_dict(r) for r in rules),
            prohibited_operations=frozenset(prohibited),
            risk_threshold_alpha=float(alpha),
            quorum_config=QuorumConfig.from_dict(data.get("quorum_config") or {}),
            version=data.get("version", 1),
            lineage=tuple(lineage),
        )
        doc.validate()
        return doc


def canonicalize(doc: PolicyDocument) -> bytes:
    doc.validate()
    try:
        return canonical_dumps(doc.to_dict())
    except CanonicalError as exc:
        raise MalformedDocument(str(exc)) from exc


def parse(data: bytes | str) -> PolicyDocument:
    try:
        raw = canonical_loads(data)
    except ValueError as exc:
        raise MalformedDocument(f"not a canonical policy encoding: {exc}") from exc
    return PolicyDocument.from_dict(raw)


def seal(doc: PolicyDocument) -> str:
    """SHA3-256 of the canonical encoding, as 64 lowercase hex chars."""
    return sha3_hex(canonicalize(doc))


def load_charter(path: str | os.PathLike) -> PolicyDocument:
    return parse(Path(path).read_bytes())


def save_charter(doc: PolicyDocument, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(canonicalize(doc))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# --- amendment -------------------------------------------------------------

EVOLVABLE_OPS = frozenset(
    {
        "set_alpha",
        "add_rule",
        "remove_rule",
        "set_rule_effect",
        "set_rule_match",
        "set_rule_weight",
        "add_prohibited",
        "remove_prohibited",
    }
)
IMMUTABLE_OPS = frozenset(
    {
        "set_charter_id",
        "set_quorum",
        "set_version",
        "set_lineage",
        "set_validator_key",
        "add_validator",
        "remove_validator",
        "set_auctor_key",
    }
)
MEMBERSHIP_OPS = frozenset({"set_validator_key", "add_validator", "remove_validator"})


@dataclass(frozen=True)
class Edit:
    """One field-level change. ``target`` names a rule or validator where relevant."""

    op: str
    target: str | None = None
    value: Any = None

    @property
    def evolvable(self) -> bool:
        return self.op in EVOLVABLE_OPS

    def to_dict(self) -> dict[str, Any]:
        return {"op": self.op, "target": self.target, "value": self.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Edit:
        op = data.get("op")
        if op not in EVOLVABLE_OPS and op not in IMMUTABLE_OPS:
            raise MalformedDocument(f"unknown edit op {op!r}")
        return cls(op=op, target=data.get("target"), value=data.get("value"))


@dataclass(frozen=True)
class AmendmentProposal:
    proposal_id: str
    base_hash: str
    edits: tuple[Edit, ...]
    justification: str = ""
    proposed_at: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "base_hash": self.base_hash,
            "edits": [e.to_dict() for e in self.edits],
            "justification": self.justification,
            "proposed_at": self.proposed_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AmendmentProposal:
        edits = data.get("edits") or []
        return cls(
            proposal_id=str(data["proposal_id"]),
            base_hash=str(data["base_hash"]),
            edits=tuple(Edit.from_dict(e) for e in edits),
            justification=str(data.get("justification", "")),
            proposed_at=str(data.get("proposed_at", "")),
        )

    def digest(self) -> str:
        return sha3_hex(canonical_dumps(self.to_dict()))


def _apply_edit(doc: PolicyDocument, edit: Edit) -> PolicyDocument:
    rules = list(doc.rules)

    def index_of(rule_id: Any) -> int:
        for i, rule in enumerate(rules):
            if rule.rule_id == rule_id:
                return i
        raise MalformedDocument(f"edit {edit.op}: no rule {rule_id!r}")

    if edit.op == "set_alpha":
        if isinstance(edit.value, bool) or not isinstance(edit.value, (int, float)):
            raise MalformedDocument("set_alpha needs a number")
        return dataclasses.replace(doc, risk_threshold_alpha=float(edit.value))
    if edit.op == "add_rule":
        rule = PolicyRule.from_dict(edit.value or {})
        position = len(rules) if edit.target is None else index_of(edit.target)
        rules.insert(position, rule)
    elif edit.op == "remove_rule":
        del rules[index_of(edit.target)]
    elif edit.op == "set_rule_effect":
        i = index_of(edit.target)
        try:
            rules[i] = dataclasses.replace(rules[i], effect=Effect(edit.value))
        except ValueError:
            raise MalformedDocument(f"bad effect {edit.value!r}") from None
    elif edit.op == "set_rule_match":
        i = index_of(edit.target)
        rules[i] = dataclasses.replace(rules[i], match=RuleMatch.from_dict(edit.value or {}))
    elif edit.op == "set_rule_weight":
        i = index_of(edit.target)
        if isinstance(edit.value, bool) or not isinstance(edit.value, (int, float)):
            raise MalformedDocument("set_rule_weight needs a number")
        rules[i] = dataclasses.replace(rules[i], weight=float(edit.value))
    elif edit.op == "add_prohibited":
        return dataclasses.replace(doc, prohibited_operations=doc.prohibited_operations | {str(edit.value)})
    elif edit.op == "remove_prohibited":
        return dataclasses.replace(doc, prohibited_operations=doc.prohibited_operations - {str(edit.value)})
    else:
        raise MalformedDocument(f"unknown edit op {edit.op!r}")
    return dataclasses.replace(doc, rules=tuple(rules))


def apply_amendment(doc: PolicyDocument, amendment: AmendmentProposal) -> PolicyDocument:
    """Return the amended successor of ``doc``; ``doc`` itself is untouched."""
    current = seal(doc)
    if amendment.base_hash != current:
        raise BaseHashMismatch(f"amendment base {amendment.base_hash[:16]} != sealed {current[:16]}")
    for edit in amendment.edits:
        if not edit.evolvable:
            raise ImmutableFieldEdit(f"{edit.op} edits a field frozen after genesis")
    new = doc
    for edit in amendment.edits:
        new = _apply_edit(new, edit)
    new = dataclasses.replace(new, version=doc.version + 1, lineage=doc.lineage + (current,))
    new.validate()
    return new


def verify_lineage(history: list[PolicyDocument]) -> bool:
    """Check that ``history`` (genesis first) forms an unbroken hash chain."""
    if not history or history[0].version != 1 or history[0].lineage:
        return False
    for prev, cur in zip(history, history[1:]):
        if cur.version != prev.version + 1 or cur.lineage != prev.lineage + (seal(prev),):
            return False
    return True
