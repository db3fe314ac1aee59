from __future__ import annotations

from aegis.canonical import sha3_hex
from aegis.eva import ActionProposal


def action(
    i: int | str = 0,
    category: str = "redact_personal_data",
    *,
    risk: float | None = 0.0,
    tags: tuple[str, ...] = (),
    resource: str = "records/patient",
) -> ActionProposal:
    return ActionProposal(
        action_id=f"act-{i}",
        category=category,
        payload_digest=sha3_hex(f"{category}:{i}".encode()),
        tags=frozenset(tags),
        resource=resource,
        declared_risk=risk,
    )


def build_log(path, n: int, key, *, fsync: bool = False, policy_hash: str | None = None):
    """Write ``n`` signed entries straight through an IlkWriter; returns the writer."""
    from aegis.ilk import IlkWriter

    return fill_log(IlkWriter(path, fsync=fsync), n, key, policy_hash=policy_hash)


def fill_log(writer, n: int, key, *, policy_hash: str | None = None):
    from aegis.canonical import utc_now
    from aegis.ilk import ChainedLogEntry, EkmResult, EvaResult
    from aegis.poc import StatementInputs, generate_poc

    policy_hash = policy_hash or sha3_hex(b"policy")
    for i in range(n):
        payload = sha3_hex(f"payload-{i}".encode())
        rule = "allow-all" if i % 3 else "deny-x"
        bit = 1 if i % 3 else 0
        prev = writer.head
        poc = generate_poc(StatementInputs(payload, policy_hash, bit, rule, prev), key)
        writer.append(ChainedLogEntry(
            sequence=writer.next_sequence,
            timestamp=utc_now(),
            site_id="abcd1234",
            policy_hash=policy_hash,
            action_id=f"a{i}",
            action_category="redact_personal_data" if bit else "exfiltrate_data",
            eva_result=EvaResult.PASS if bit else EvaResult.FAIL,
            ekm_result=EkmResult.COMMIT if bit else EkmResult.VETO,
            payload_digest=payload,
            verdict_bit=bit,
            matched_rule=rule,
            poc=poc,
            prev_chain_hash=prev,
            detail={"uncertainty": 0.05 * (i % 4)},
        ))
    return writer
