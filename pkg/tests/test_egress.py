from __future__ import annotations

import threading

import pytest

from aegis import crypto
from aegis.egress import Attestation, EgressMediator, attest
from aegis.ekm import Mode, OutcomeKind
from aegis.harness import run_egress_scenario
from aegis.ilk import read_log
from helpers import action

CLIENT = crypto.generate_key()


@pytest.fixture
def mediator(unit):
    return EgressMediator(unit.gate, {"partner": crypto.public_hex(CLIENT)})


def _entries(mediator):
    return len([r for r in read_log(mediator.gate.ilk.path) if r["type"] == "entry"])


def test_attested_emission_reaches_gate(mediator):
    a = action(1)
    out = mediator.mediate_egress(a, attest(a, mediator.gate.policy_hash, "partner", CLIENT))
    assert out.kind is OutcomeKind.COMMITTED


@pytest.mark.parametrize(
    "make, reason",
    [
        (lambda a, ph: None, "missing attestation"),
        (lambda a, ph: attest(a, ph, "stranger", CLIENT), "unknown client 'stranger'"),
        (lambda a, ph: attest(a, ph, "partner", crypto.generate_key()), "bad request signature"),
        (lambda a, ph: attest(a, "0" * 64, "partner", CLIENT), "stale policy hash"),
        (lambda a, ph: attest(action(2), ph, "partner", CLIENT), "bad request signature"),
    ],
)
def test_dropped_without_logging(mediator, make, reason):
    a = action(1)
    out = mediator.mediate_egress(a, make(a, mediator.gate.policy_hash))
    assert out.kind is OutcomeKind.DROPPED and out.reason == reason
    assert _entries(mediator) == 0 and mediator.dropped == 1


def test_threshold_locks_down(mediator):
    kinds = [mediator.mediate_egress(action(i), None).kind for i in range(3)]
    assert kinds == [OutcomeKind.DROPPED, OutcomeKind.DROPPED, OutcomeKind.LOCKDOWN]
    assert mediator.gate.mode is Mode.LOCKDOWN
    assert mediator.gate.certificate.evidence["consecutive"] == 3


def test_valid_traffic_resets_consecutive_count(mediator):
    ph = mediator.gate.policy_hash
    for i in range(5):
        mediator.mediate_egress(action(i), None)
        mediator.mediate_egress(action(i), None)
        a = action(100 + i)
        assert mediator.mediate_egress(a, attest(a, ph, "partner", CLIENT)).kind is OutcomeKind.COMMITTED
    assert mediator.dropped == 10 and mediator.gate.mode is Mode.OPERATIONAL


def test_concurrent_submissions_serialize(mediator):
    ph = mediator.gate.policy_hash
    results = []

    def worker(k):
        for i in range(10):
            a = action(f"{k}-{i}")
            results.append(mediator.mediate_egress(a, attest(a, ph, "partner", CLIENT)).kind)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count(OutcomeKind.COMMITTED) == 40
    seqs = [r["sequence"] for r in read_log(mediator.gate.ilk.path)]
    assert seqs == list(range(40))


def test_attestation_roundtrip():
    a = attest(action(1), "ab" * 32, "partner", CLIENT)
    assert Attestation.from_dict(a.to_dict()) == a
    assert Attestation.from_dict(None) is None


def test_egress_scenario(tmp_path):
    assert run_egress_scenario(tmp_path, fsync=False) == {
        "attested": "COMMITTED", "stale_hash": "DROPPED", "unattested": "DROPPED", "threshold": "LOCKDOWN",
    }
