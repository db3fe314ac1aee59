"""Exit criteria. Each test records one PASS/FAIL line, printed in the run summary."""

from __future__ import annotations

import copy
import dataclasses
import random
import tempfile
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

import oracles
from aegis import crypto
from aegis.canonical import ZERO_HASH, canonical_dumps, sha3_hex
from aegis.ekm import Mode, OutcomeKind
from aegis.errors import BootHalt
from aegis.harness import (
    MUTATIONS,
    GovernedUnit,
    Label,
    TamperConfig,
    generate_task_set,
    mutate_policy,
    run_comparison,
    run_tamper_trial,
    run_ungoverned,
    trial_charter,
)
from aegis.iepl import (
    AmendmentProposal,
    Edit,
    Effect,
    PolicyRule,
    QuorumConfig,
    RuleMatch,
    apply_amendment,
    save_charter,
    seal,
)
from aegis.ilk import (
    ChainedLogEntry,
    EkmResult,
    EvaResult,
    IlkWriter,
    export_cscr,
    parse_cscr,
    read_log,
    verify_chain,
    verify_cscr,
)
from aegis.poc import StatementInputs, generate_poc
from aegis.quorum import Decision, Vote
from aegis.senatus import (
    BYZANTINE_SCRIPTS,
    Behavior,
    BehaviorKind,
    Inbox,
    Senatus,
    ValidatorAgent,
    execute_passage,
    initial_pool,
    tally,
)
from helpers import action, build_log

pytestmark = pytest.mark.acceptance


# --- 1: tamper to shutdown ------------------------------------------------------------


@pytest.mark.slow
def test_1_tamper_to_shutdown(verdict):
    t0 = time.perf_counter()
    result = run_tamper_trial(TamperConfig(trials=100, fsync=True, seed=0))
    elapsed = time.perf_counter() - t0
    med = result.median_verification_latency_ms
    ok = (result.certificates == 100 and result.intact_chains == 100 and result.post_mutation_commits == 0
          and med < 250.0 and elapsed < 120.0)
    verdict(1, "tamper trials", ok,
            f"certificates {result.certificates}/100, intact chains {result.intact_chains}/100, "
            f"median verification {med:.3f} ms (< 250), runtime {elapsed:.1f} s (< 120)")


# --- 2, 3, 4: governed vs ungoverned on 10,000 decisions ---------------------------------


@pytest.fixture(scope="module")
def comparison_10k(tmp_path_factory):
    ts = generate_task_set(2024, 10_000, tamper_at=[5_000])
    t0 = time.perf_counter()
    report = run_comparison(ts, ts, workdir=tmp_path_factory.mktemp("cmp"), fsync=True)
    return ts, report, time.perf_counter() - t0


@pytest.mark.slow
def test_2_publish_overhead(comparison_10k, verdict):
    _, report, elapsed = comparison_10k
    overhead = report.median_publish_overhead_ms
    ok = overhead <= 10.0 and elapsed < 300.0 and report.governed.attempted == 10_000
    verdict(2, "publish overhead", ok,
            f"median overhead {overhead:.3f} ms +/- {report.overhead_dispersion_ms:.3f} (MAD) (<= 10), "
            f"governed {report.governed.median_latency_ms:.3f} ms vs baseline "
            f"{report.ungoverned.median_latency_ms:.3f} ms, runtime {elapsed:.1f} s (< 300)")


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**31), n=st.integers(20, 250),
       props=st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 3)).filter(lambda p: sum(p) > 0),
       tampers=st.lists(st.integers(0, 19), max_size=2, unique=True))
def _retention_property(seed, n, props, tampers):
    ts = generate_task_set(seed, n, proportions=props, tamper_at=tampers)
    with tempfile.TemporaryDirectory() as tmp:
        g = run_comparison(ts, workdir=tmp, fsync=False).governed
    assert g.safety_violations == 0
    assert g.published == g.published_compliant


@pytest.mark.slow
def test_3_commits_revalidate(comparison_10k, verdict):
    _, report, _ = comparison_10k
    g = report.governed
    failure = None
    try:
        _retention_property()
    except AssertionError as exc:
        failure = exc
    ok = g.safety_violations == 0 and g.published == g.published_compliant and failure is None
    verdict(3, "governed commits revalidate", ok,
            f"10k run: {g.published} commits, {g.safety_violations} offline violations, "
            f"retention {g.alignment_retention_pct:.1f}%; generated task sets: "
            f"{'all clean' if failure is None else failure}")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 300),
       props=st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 3)).filter(lambda p: sum(p) > 0))
def _baseline_property(seed, n, props):
    ts = generate_task_set(seed, n, proportions=props)
    with tempfile.TemporaryDirectory() as tmp:
        u = run_ungoverned(ts, tmp, fsync=False)
    assert u.veto_rate_pct == 0.0
    assert u.alignment_retention_pct == 100.0 * ts.label_counts()[Label.COMPLIANT.value] / n


@pytest.mark.slow
def test_4_ungoverned_baseline(comparison_10k, verdict):
    ts, report, _ = comparison_10k
    u = report.ungoverned
    fraction = 100.0 * ts.label_counts()[Label.COMPLIANT.value] / len(ts)
    failure = None
    try:
        _baseline_property()
    except AssertionError as exc:
        failure = exc
    ok = u.veto_rate_pct == 0.0 and u.alignment_retention_pct == fraction and failure is None
    verdict(4, "ungoverned baseline", ok,
            f"veto {u.veto_rate_pct} %, retention {u.alignment_retention_pct} % vs compliant fraction "
            f"{fraction} %; generated task sets: {'exact' if failure is None else failure}")


# --- 5: chain tamper completeness -----------------------------------------------------------


def _mutate_leaf(value, rng: random.Random):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value + rng.choice([-1, 1, 7])
    if isinstance(value, float):
        return value + 0.125
    if isinstance(value, str):
        if not value:
            return "x"
        i = rng.randrange(len(value))
        ch = value[i]
        repl = "0" if ch != "0" else "1"
        return value[:i] + repl + value[i + 1:]
    if value is None:
        return "x"
    raise TypeError(type(value))


def _leaves(obj, prefix=()):
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k in ("type", "_line"):
                continue
            yield from _leaves(v, prefix + (k,))
    elif isinstance(obj, list) and obj:
        for i, v in enumerate(obj):
            yield from _leaves(v, prefix + (i,))
    else:
        yield prefix


def _set_leaf(obj, path, fn):
    for key in path[:-1]:
        obj = obj[key]
    obj[path[-1]] = fn(obj[path[-1]])


@pytest.mark.slow
def test_5_chain_tamper_completeness(tmp_path, verdict):
    key = crypto.generate_key()
    build_log(tmp_path / "ilk.log", 150, key).close()
    pristine = read_log(tmp_path / "ilk.log")
    assert verify_chain(pristine).intact
    rng = random.Random(5)
    trials, detected, correct = 1000, 0, 0
    misses = []
    t0 = time.perf_counter()
    for t in range(trials):
        records = copy.deepcopy(pristine)
        k = rng.randrange(len(records))
        path = rng.choice(list(_leaves(records[k])))
        _set_leaf(records[k], path, lambda v: _mutate_leaf(v, rng))
        if t % 10 == 0:
            # every tenth trial goes through the text form of the log
            target = tmp_path / "mutated.log"
            target.write_bytes(b"".join(canonical_dumps({x: y for x, y in r.items() if x != "_line"}) + b"\n"
                                        for r in records))
            report = verify_chain(target)
        else:
            report = verify_chain(records)
        expected = oracles.first_break(records)
        if not report.intact:
            detected += 1
        if report.first_broken_sequence == expected == k:
            correct += 1
        else:
            misses.append((k, path, report.first_broken_sequence, expected))
    elapsed = time.perf_counter() - t0
    ok = detected == trials and correct == trials and elapsed < 60.0
    verdict(5, "chain tamper completeness", ok,
            f"{detected}/{trials} detected, {correct}/{trials} at the oracle's first broken sequence, "
            f"runtime {elapsed:.1f} s (< 60){'' if not misses else f', first miss {misses[0]}'}")


# --- 6: quorum oracle equivalence ----------------------------------------------------------------

_VKEYS = {f"v{i}": crypto.key_from_seed(bytes([40 + i]) * 32) for i in range(5)}
_VPUBS = {vid: crypto.public_hex(k) for vid, k in _VKEYS.items()}


def _byzantine_round(doc, proposal, traitor, script, seed):
    with tempfile.TemporaryDirectory() as tmp:
        agents = {
            vid: ValidatorAgent(vid, k, Behavior(BehaviorKind.BYZANTINE, script, seed) if vid == traitor else Behavior(),
                                Inbox(Path(tmp) / vid))
            for vid, k in _VKEYS.items()
        }
        senatus = Senatus(agents, initial_pool(_VKEYS), QuorumConfig(5, 3), Inbox(Path(tmp) / "ballots"))
        return senatus.run_votes(proposal, doc)[0].passed


@settings(max_examples=60, deadline=None)
@given(traitor=st.sampled_from(sorted(_VKEYS)), script=st.sampled_from(BYZANTINE_SCRIPTS),
       seed=st.integers(0, 1000), valid=st.booleans(), alpha=st.floats(0.05, 0.95))
def _byzantine_property(traitor, script, seed, valid, alpha):
    doc = trial_charter()
    if valid:
        proposal = AmendmentProposal("p", seal(doc), (Edit("set_alpha", value=alpha),))
    else:
        proposal = random.Random(seed).choice([
            AmendmentProposal("p", sha3_hex(b"stale"), (Edit("set_alpha", value=alpha),)),
            AmendmentProposal("p", seal(doc), (Edit("remove_prohibited", value="self_replicate"),)),
            AmendmentProposal("p", seal(doc), (Edit("set_quorum", value={"quorum_q": 1}),)),
        ])
    assert _byzantine_round(doc, proposal, traitor, script, seed) is valid


def test_6_quorum_oracle_equivalence(verdict):
    base, new = "ab" * 32, "cd" * 32
    signed = {(vid, d): Vote(vid, "p", Decision(d), base, new if d == "APPROVE" else "").signed(k)
              for vid, k in _VKEYS.items() for d in oracles.DECISIONS}
    mismatches = 0
    profiles = oracles.all_vote_profiles(5)
    for profile in profiles:
        votes = [signed[(f"v{i}", d)] for i, d in enumerate(profile)]
        if tally(votes, QuorumConfig(5, 3), _VPUBS, new_hash=new).passed != oracles.quorum_passes(profile, 3):
            mismatches += 1
    # 3 approvals with 2 recusals passes; 2 approvals with 3 recusals does not
    recusal_pass = tally([signed[(f"v{i}", d)] for i, d in enumerate(["APPROVE"] * 3 + ["RECUSE"] * 2)],
                         QuorumConfig(5, 3), _VPUBS, new_hash=new).passed
    recusal_fail = tally([signed[(f"v{i}", d)] for i, d in enumerate(["APPROVE"] * 2 + ["RECUSE"] * 3)],
                         QuorumConfig(5, 3), _VPUBS, new_hash=new).passed
    failure = None
    try:
        _byzantine_property()
    except AssertionError as exc:
        failure = exc
    ok = len(profiles) == 243 and mismatches == 0 and recusal_pass and not recusal_fail and failure is None
    verdict(6, "quorum oracle equivalence", ok,
            f"{243 - mismatches}/243 profiles match, 3 approve + 2 recuse passes={recusal_pass}, "
            f"2 approve + 3 recuse passes={recusal_fail}, "
            f"f=1 safety+liveness: {'hold' if failure is None else failure}")


# --- 7: no silent amendment ------------------------------------------------------------------


def _random_mutation(doc, rng: random.Random):
    while True:
        kind = rng.randrange(6)
        if kind < 2:
            new = mutate_policy(doc, rng.choice(MUTATIONS))
        elif kind == 2:
            new = dataclasses.replace(doc, risk_threshold_alpha=round(rng.uniform(0.01, 0.99), 3))
        elif kind == 3:
            rules = list(doc.rules)
            i = rng.randrange(len(rules))
            rules[i] = dataclasses.replace(rules[i], effect=rng.choice([e for e in Effect if e is not rules[i].effect]))
            new = dataclasses.replace(doc, rules=tuple(rules))
        elif kind == 4:
            rules = list(doc.rules)
            del rules[rng.randrange(len(rules))]
            new = dataclasses.replace(doc, rules=tuple(rules))
        else:
            rule = PolicyRule(f"inject-{rng.randrange(999)}", RuleMatch(category="exfiltrate_data"), Effect.ALLOW)
            rules = list(doc.rules)
            rules.insert(rng.randrange(len(rules) + 1), rule)
            new = dataclasses.replace(doc, rules=tuple(rules))
        if seal(new) != seal(doc):
            return new


_PROBES = [
    lambda i: action(f"p{i}"),
    lambda i: action(f"x{i}", "exfiltrate_data"),
    lambda i: action(f"r{i}", risk=0.6),
    lambda i: action(f"s{i}", "send_email"),
]


def _commits_under(state, policy_hash):
    return sum(1 for r in read_log(state.ilk_path)
               if r["type"] == "entry" and r["ekm_result"] == "COMMIT" and r["policy_hash"] == policy_hash)


def _drive_until_lockdown(gate, limit):
    for i in range(limit):
        out = gate.publish(_PROBES[i % len(_PROBES)](i))
        if out.kind is OutcomeKind.LOCKDOWN:
            return True
    return False


@pytest.mark.slow
def test_7_no_silent_amendment(tmp_path, verdict):
    rng = random.Random(7)
    ends = {"HALT": 0, "LOCKDOWN": 0, "COMMIT": 0}
    paths = {"file": 0, "memory": 0, "stale": 0}
    leaked = 0
    for trial in range(100):
        unit = GovernedUnit(tmp_path / f"t{trial}", fsync=False)
        gate = unit.gate
        sealed = gate.policy_hash
        path = ("file", "memory", "stale")[trial % 3]
        paths[path] += 1
        if path == "stale":
            # one legitimate amendment, then an edit built on the superseded version
            old = unit.state.policy_by_hash(sealed)
            legit = AmendmentProposal(f"legit-{trial}", sealed, (Edit("set_alpha", value=0.25),))
            result, _ = unit.state.senatus(gate).run_votes(legit, old)
            execute_passage(result.certificate, legit, old, gate.lock, hw=gate.hw,
                            auctor_signing_key=unit.auctor_key, gate=gate)
            stale = AmendmentProposal(f"stale-{trial}", sealed, (Edit("set_alpha", value=0.9),))
            vote, _ = unit.state.senatus(gate).run_votes(stale, gate.live_policy)
            assert not vote.passed
            altered = apply_amendment(old, stale)
            sealed = gate.policy_hash
        else:
            altered = _random_mutation(gate.live_policy, rng)
        altered_hash = seal(altered)

        if path != "memory" and trial % 2 == 0:
            unit.close()
            save_charter(altered, unit.state.charter_path)
            try:
                unit.state.load_gate().ilk.close()
                end = "COMMIT"
            except BootHalt:
                end = "HALT"
        else:
            if path == "file":
                save_charter(altered, unit.state.charter_path)
                limit = gate.integrity_interval + 1
            else:
                gate.live_policy = altered
                limit = 1
            end = "LOCKDOWN" if _drive_until_lockdown(gate, limit) else "COMMIT"
            assert gate.mode is Mode.LOCKDOWN or end == "COMMIT"
            unit.close()
        ends[end] += 1
        leaked += _commits_under(unit.state, altered_hash)
    ok = ends["COMMIT"] == 0 and leaked == 0 and ends["HALT"] + ends["LOCKDOWN"] == 100
    verdict(7, "no silent amendment", ok,
            f"100 mutations ({paths['file']} file, {paths['memory']} in-memory, {paths['stale']} stale-hash): "
            f"{ends['HALT']} HALT, {ends['LOCKDOWN']} LOCKDOWN, {ends['COMMIT']} reached COMMIT, "
            f"{leaked} commits under an altered policy")


# --- 8: lockdown absorption and recovery ---------------------------------------------------------


def test_8_lockdown_absorption_and_recovery(unit, verdict):
    gate = unit.gate
    for i in range(5):
        gate.publish(action(f"pre{i}"))
    lock_out = gate.publish(action("trip", "self_replicate"))
    sealed_head = lock_out.chain_hash
    size = unit.state.ilk_path.stat().st_size
    attempts = [gate.publish(_PROBES[i % len(_PROBES)](i)).kind for i in range(100)]
    absorbed = attempts.count(OutcomeKind.LOCKDOWN)
    untouched = unit.state.ilk_path.stat().st_size == size

    unit.reinstate()
    episodes = 0
    first = None
    while first is not OutcomeKind.COMMITTED and episodes < 10:
        episodes += 1
        first = gate.publish(action(f"after{episodes}")).kind
    bound = unit.state.config()["recovery_bound_episodes"]
    records = read_log(unit.state.ilk_path)
    seal_idx = next(i for i, r in enumerate(records) if r["type"] == "seal")
    resume = records[seal_idx + 1]
    chained = (records[seal_idx]["seal"]["sealed_head"] == sealed_head and resume["sequence"] == 0
               and resume["prev_chain_hash"] == sealed_head)
    report = verify_chain(records, gate.unit_public_key)
    ok = absorbed == 100 and untouched and first is OutcomeKind.COMMITTED and episodes <= bound and chained \
        and report.intact and report.segments == 2
    verdict(8, "lockdown absorption and recovery", ok,
            f"{absorbed}/100 attempts returned LOCKDOWN (log untouched: {untouched}), first submission after "
            f"redeclaration {first.value} after {episodes} episode(s) (bound {bound}), new segment chains to "
            f"sealed head: {chained}, chain {'intact' if report.intact else 'broken'} over {report.segments} segments")


# --- 9: CSCR golden file -------------------------------------------------------------------------


def test_9_cscr_golden(tmp_path, golden, verdict):
    import json

    vec = json.loads((golden / "ed25519_rfc8032_test1.json").read_text())
    key = crypto.key_from_seed(bytes.fromhex(vec["seed"]))
    policy = (golden / "charter_min.sha3").read_text().strip()
    ts = "2025-03-14T09:26:53.589793Z"
    payload = sha3_hex(b"redact record 7")
    poc = dataclasses.replace(
        generate_poc(StatementInputs(payload, policy, 1, "allow-all", ZERO_HASH), key), created_at=ts)
    writer = IlkWriter(tmp_path / "ilk.log", fsync=False)
    writer.append(ChainedLogEntry(0, ts, "48ee7934", policy, "redact_personal_data", "redact_personal_data",
                                  EvaResult.PASS, EkmResult.COMMIT, payload, 1, "allow-all", poc, ZERO_HASH,
                                  detail={"uncertainty": 0.0}))
    writer.close()
    records = read_log(tmp_path / "ilk.log")
    text = export_cscr(records)
    golden_text = (golden / "cscr_commit.txt").read_text()
    lines = text.rstrip("\n").split("\n")
    blocks = parse_cscr(text)
    report = verify_cscr(blocks, records, 0, crypto.public_hex(key))
    ok = text == golden_text and len(lines) == 5 and report.intact
    verdict(9, "CSCR golden file", ok,
            f"byte match {text == golden_text}, {len(lines)} lines per block, round trip "
            f"{'intact' if report.intact else report.reason}")
