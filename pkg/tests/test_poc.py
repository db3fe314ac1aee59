from __future__ import annotations

import dataclasses

import pytest

import oracles
from aegis import crypto
from aegis.canonical import sha3_hex
from aegis.errors import UnknownBackend
from aegis.poc import ProofOfConduct, StatementInputs, generate_poc, get_backend, verify_poc

KEY = crypto.key_from_seed(bytes(range(32)))
PUB = crypto.public_hex(KEY)
INPUTS = StatementInputs(sha3_hex(b"p"), sha3_hex(b"policy"), 1, "allow-all", "0" * 64)


def test_statement_digest_matches_oracle():
    i = INPUTS
    assert i.statement_digest() == oracles.statement_digest(
        i.payload_digest, i.policy_hash, i.verdict_bit, i.matched_rule, i.prev_chain_hash)


def test_generate_and_verify():
    poc = generate_poc(INPUTS, KEY)
    assert verify_poc(poc, INPUTS, PUB)
    assert ProofOfConduct.from_dict(poc.to_dict()) == poc


@pytest.mark.parametrize(
    "field, value",
    [("policy_hash", sha3_hex(b"other")), ("verdict_bit", 0), ("matched_rule", "allow-al1"),
     ("prev_chain_hash", "1" * 64), ("payload_digest", sha3_hex(b"q"))],
)
def test_any_input_change_fails(field, value):
    poc = generate_poc(INPUTS, KEY)
    assert not verify_poc(poc, dataclasses.replace(INPUTS, **{field: value}), PUB)


def test_wrong_key_fails():
    poc = generate_poc(INPUTS, KEY)
    assert not verify_poc(poc, INPUTS, crypto.public_hex(crypto.generate_key()))


def test_rule_length_prefix_prevents_ambiguity():
    a = StatementInputs(INPUTS.payload_digest, INPUTS.policy_hash, 1, "ab", INPUTS.prev_chain_hash)
    b = StatementInputs(INPUTS.payload_digest, INPUTS.policy_hash, 1, "a", INPUTS.prev_chain_hash)
    assert a.statement_digest() != b.statement_digest()


def test_malformed_inputs_do_not_verify():
    poc = generate_poc(INPUTS, KEY)
    assert not verify_poc(poc, dataclasses.replace(INPUTS, policy_hash="unsealable:X"), PUB)


def test_unknown_backend():
    with pytest.raises(UnknownBackend):
        get_backend("zk-stark")
    with pytest.raises(UnknownBackend):
        generate_poc(INPUTS, KEY, "zk-stark")


def test_deterministic_signature():
    assert generate_poc(INPUTS, KEY).unit_signature == generate_poc(INPUTS, KEY).unit_signature
