"""``aegis`` command line.

Exit codes: 0 success, 2 veto (or rejected amendment), 3 lockdown,
4 verification failure or boot halt, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from filelock import Timeout

from . import crypto
from .canonical import canonical_dumps, is_hex32, utc_now
from .daemon import request, running_daemon, serve
from .egress import EgressMediator, attest
from .ekm import OutcomeKind, PublishOutcome
from .errors import AegisError, BootHalt, MalformedAction, MalformedDocument, MalformedLog, RangeEmpty
from .eva import ActionProposal
from .iepl import AmendmentProposal, Edit, load_charter
from .ilk import export_cscr, locate_cscr_start, parse_cscr, read_log, verify_chain, verify_cscr
from .senatus import SimulatedNetwork, execute_passage
from .state import STATE_ENV, AlreadyDeclared, StateDirectory

EXIT_OK = 0
EXIT_VETO = 2
EXIT_LOCKDOWN = 3
EXIT_VERIFY = 4
EXIT_USAGE = 64

_OUTCOME_EXIT = {
    OutcomeKind.COMMITTED: EXIT_OK,
    OutcomeKind.VETOED: EXIT_VETO,
    OutcomeKind.LOCKDOWN: EXIT_LOCKDOWN,
    OutcomeKind.DROPPED: EXIT_VERIFY,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(data: Any, pretty: bool, text: str | None = None) -> None:
    if pretty:
        print(text if text is not None else json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(canonical_dumps(data).decode("utf-8"))


def _state(args) -> StateDirectory:
    path = args.state or os.environ.get(STATE_ENV) or "aegis-state"
    return StateDirectory(path)


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _public_key_arg(value: str) -> str:
    if is_hex32(value):
        return value
    try:
        text = Path(value).read_text().strip()
    except OSError as exc:
        raise UsageError(f"--unit-key: {exc}") from exc
    if not is_hex32(text):
        raise UsageError("--unit-key must be a 64-hex public key or a file containing one")
    return text


def _load_private(path: str):
    try:
        return crypto.load_key(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load key {path}: {exc}") from exc


# --- commands ------------------------------------------------------------------


def cmd_keygen(args) -> int:
    key = crypto.generate_key()
    if Path(args.out).exists():
        raise UsageError(f"{args.out} exists")
    crypto.save_key(key, args.out)
    _emit({"private_key_file": str(args.out), "public_key": crypto.public_hex(key)}, args.pretty)
    return EXIT_OK


def cmd_genesis_init(args) -> int:
    sd = _state(args)
    try:
        charter = load_charter(args.charter)
    except (OSError, MalformedDocument, ValueError) as exc:
        raise UsageError(f"charter: {exc}") from exc
    key = _load_private(args.auctor_key)
    try:
        lock = sd.init(charter, key, roster_size=args.roster_size)
    except AlreadyDeclared as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit({"state": str(sd.path), "lock": lock.to_dict(), "lock_digest": lock.digest()}, args.pretty)
    return EXIT_OK


def _boot(sd: StateDirectory):
    try:
        return sd.load_gate()
    except BootHalt as exc:
        print(f"HALT({exc.reason})", file=sys.stderr)
        return None


def cmd_run(args) -> int:
    sd = _state(args)
    cfg = sd.config()
    try:
        with sd.file_lock(timeout=0.5):
            gate = _boot(sd)
            if gate is None:
                return EXIT_VERIFY
            mediator = EgressMediator(gate, sd.client_keys(), cfg["unattested_threshold"])
            port = args.port if args.port is not None else cfg["port"]
            print(f"serving {sd.path} on {args.host}:{port or 'auto'}", file=sys.stderr)
            try:
                serve(mediator, sd.path, args.host, port)
            finally:
                gate.ilk.close()
    except Timeout:
        print("state directory is held by another writer", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _outcome_exit(sd: StateDirectory, outcome: PublishOutcome, pretty: bool) -> int:
    data = outcome.to_dict()
    text = f"{outcome.kind.value} {outcome.action_id}"
    if outcome.chain_hash:
        text += f" chain_hash={outcome.chain_hash}"
    if outcome.reason:
        text += f" reason={outcome.reason}"
    if outcome.certificate is not None:
        path = str(sd.certificate_path(outcome.certificate))
        data["certificate_path"] = path
        text += f"\ncertificate: {path}"
    _emit(data, pretty, text)
    return _OUTCOME_EXIT[outcome.kind]


def cmd_submit(args) -> int:
    sd = _state(args)
    try:
        action = ActionProposal.from_dict(_read_json(args.action_file))
    except MalformedAction as exc:
        raise UsageError(str(exc)) from exc
    client_key = _load_private(args.client_key or str(sd.path / "client.key"))
    address = running_daemon(sd.path)
    if address is not None:
        status = request(address, {"type": "status"})
        policy_hash = status["state"]["policy_hash"]
        att = attest(action, policy_hash, args.client_id, client_key)
        reply = request(address, {"type": "publish", "action": action.to_dict(), "attestation": att.to_dict()})
        if not reply.get("ok"):
            print(reply.get("error"), file=sys.stderr)
            return EXIT_USAGE
        return _outcome_exit(sd, PublishOutcome.from_dict(reply["outcome"]), args.pretty)
    try:
        with sd.file_lock():
            gate = _boot(sd)
            if gate is None:
                return EXIT_VERIFY
            try:
                mediator = EgressMediator(gate, sd.client_keys(), sd.config()["unattested_threshold"])
                att = attest(action, gate.policy_hash, args.client_id, client_key)
                outcome = mediator.mediate_egress(action, att)
            finally:
                gate.ilk.close()
    except Timeout:
        print("state directory is busy", file=sys.stderr)
        return EXIT_USAGE
    return _outcome_exit(sd, outcome, args.pretty)


def cmd_status(args) -> int:
    sd = _state(args)
    address = running_daemon(sd.path)
    if address is not None:
        reply = request(address, {"type": "status"})
        _emit({"daemon": f"{address[0]}:{address[1]}", **reply["state"]}, args.pretty)
        return EXIT_OK
    with sd.file_lock():
        gate = _boot(sd)
        if gate is None:
            return EXIT_VERIFY
        try:
            state = gate.state().to_dict()
        finally:
            gate.ilk.close()
    _emit({"daemon": None, "genesis": "VERIFIED", **state}, args.pretty)
    return EXIT_OK


def cmd_amend_propose(args) -> int:
    sd = _state(args)
    data = _read_json(args.edits_file)
    if isinstance(data, list):
        data = {"edits": data}
    try:
        edits = tuple(Edit.from_dict(e) for e in data.get("edits") or [])
    except (MalformedDocument, AttributeError) as exc:
        raise UsageError(f"edits: {exc}") from exc
    lock = sd.load_lock()
    proposal = AmendmentProposal(
        proposal_id=args.id or f"amend-{utc_now().replace(':', '').replace('.', '')}",
        base_hash=lock.policy_hash,
        edits=edits,
        justification=args.justification or data.get("justification", ""),
        proposed_at=utc_now(),
    )
    path = sd.save_proposal(proposal)
    _emit({"proposal": proposal.to_dict(), "digest": proposal.digest(), "path": str(path)}, args.pretty)
    return EXIT_OK


def cmd_amend_status(args) -> int:
    sd = _state(args)
    try:
        proposal = sd.load_proposal(args.proposal_id)
    except OSError:
        raise UsageError(f"no proposal {args.proposal_id!r}") from None
    result = sd.load_result(args.proposal_id)
    status = result["result"] if result else "PENDING"
    _emit({"proposal": proposal.to_dict(), "status": status, "result": result}, args.pretty)
    return EXIT_OK


def cmd_amend_run_votes(args) -> int:
    sd = _state(args)
    try:
        proposal = sd.load_proposal(args.proposal_id)
    except OSError:
        raise UsageError(f"no proposal {args.proposal_id!r}") from None
    auctor = _load_private(args.auctor_key)
    if running_daemon(sd.path) is not None:
        print("stop the daemon before running votes", file=sys.stderr)
        return EXIT_USAGE
    with sd.file_lock():
        gate = _boot(sd)
        if gate is None:
            return EXIT_VERIFY
        try:
            doc = sd.policy_by_hash(gate.lock.policy_hash)
            network = SimulatedNetwork(loss_rate=args.loss_rate, seed=args.seed)
            result, votes = sd.senatus(gate, network).run_votes(proposal, doc)
            record: dict[str, Any] = {**result.to_dict(), "votes": [v.to_dict() for v in votes]}
            code = EXIT_VETO
            if result.passed:
                try:
                    _, new_lock = execute_passage(
                        result.certificate, proposal, doc, gate.lock, hw=gate.hw, auctor_signing_key=auctor, gate=gate
                    )
                except AegisError as exc:
                    record.update(result="PASSAGE_FAILED", reason=f"{type(exc).__name__}: {exc}")
                    code = EXIT_VERIFY
                else:
                    record.update(new_policy_hash=new_lock.policy_hash, new_lock_digest=new_lock.digest(),
                                  mode=gate.mode.value)
                    code = EXIT_OK
        finally:
            gate.ilk.close()
    sd.save_result(proposal.proposal_id, record)
    _emit(record, args.pretty)
    return code


def cmd_export_cscr(args) -> int:
    sd = _state(args)
    log = Path(args.log) if args.log else sd.ilk_path
    try:
        text = export_cscr(read_log(log), args.from_, args.to, full=args.full)
    except RangeEmpty as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedLog) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VERIFY
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_log(args) -> int:
    key = _public_key_arg(args.unit_key) if args.unit_key else None
    try:
        raw = Path(args.file).read_text()
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    try:
        if raw.lstrip().startswith("["):
            if not args.log:
                raise UsageError("verifying a CSCR export needs --log <ilk.log> to cross-check against")
            blocks = parse_cscr(raw)
            records = read_log(args.log)
            start = locate_cscr_start(blocks, records)
            report = verify_cscr(blocks, records, start, key)
            kind = "cscr"
        else:
            report = verify_chain(read_log(args.file), key)
            kind = "ilk"
    except MalformedLog as exc:
        _emit({"status": "malformed", "line": exc.line, "reason": str(exc)}, args.pretty, f"malformed: {exc}")
        return EXIT_VERIFY
    data = {"status": "intact" if report.intact else "broken", "format": kind, **report.to_dict()}
    if report.intact:
        text = f"intact ({report.entries_checked} entries, {report.segments} segments, head {report.head})"
    else:
        text = f"broken at sequence {report.first_broken_sequence} (line {report.line}): {report.reason}"
    _emit(data, args.pretty, text)
    return EXIT_OK if report.intact else EXIT_VERIFY


def _write_report(path: str | None, report: dict[str, Any]) -> None:
    if path:
        Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_bench_tamper(args) -> int:
    from .harness import TamperConfig, run_tamper_trial

    result = run_tamper_trial(TamperConfig(trials=args.trials, warmup=args.warmup, fsync=not args.no_fsync,
                                           seed=args.seed))
    report = result.to_dict()
    _write_report(args.out, report)
    summary = {k: v for k, v in report.items() if k != "samples"}
    _emit(summary, args.pretty)
    ok = result.certificates == args.trials and result.intact_chains == args.trials
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench_compare(args) -> int:
    from .harness import run_comparisons

    report = run_comparisons(args.seed, args.episodes, args.runs, tampers=args.tampers, fsync=not args.no_fsync)
    _write_report(args.out, report)
    _emit({k: v for k, v in report.items() if k != "reports"}, args.pretty)
    return EXIT_OK if report["summary"]["governed"]["safety_violations"] == 0 else EXIT_VERIFY


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS so a subcommand's copy does not clobber a value given before it
    common.add_argument("--state", default=argparse.SUPPRESS,
                        help=f"state directory (default: ${STATE_ENV} or ./aegis-state)")
    common.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS, help="human-readable output")

    parser = _Parser(prog="aegis", description="Policy-sealed publish gate with a chained audit log.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("keygen", parents=[common], help="write a new Ed25519 private key")
    p.add_argument("out")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("genesis-init", parents=[common], help="declare the trust root for a new unit")
    p.add_argument("--charter", required=True)
    p.add_argument("--auctor-key", required=True, help="founding authority private key file")
    p.add_argument("--roster-size", type=int, default=None)
    p.set_defaults(func=cmd_genesis_init)

    p = sub.add_parser("run", parents=[common], help="boot and serve the loopback daemon")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("submit", parents=[common], help="publish one action")
    p.add_argument("action_file")
    p.add_argument("--client-key", default=None)
    p.add_argument("--client-id", default="default")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", parents=[common], help="gate state")
    p.set_defaults(func=cmd_status)

    amend = sub.add_parser("amend", parents=[common], help="policy amendments")
    asub = amend.add_subparsers(dest="amend_command", metavar="ACTION", parser_class=_Parser)
    asub.required = True
    p = asub.add_parser("propose", parents=[common])
    p.add_argument("edits_file")
    p.add_argument("--id", default=None)
    p.add_argument("--justification", default=None)
    p.set_defaults(func=cmd_amend_propose)
    p = asub.add_parser("status", parents=[common])
    p.add_argument("proposal_id")
    p.set_defaults(func=cmd_amend_status)
    p = asub.add_parser("run-votes", parents=[common])
    p.add_argument("proposal_id")
    p.add_argument("--auctor-key", required=True)
    p.add_argument("--loss-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_amend_run_votes)

    p = sub.add_parser("export-cscr", parents=[common], help="render log entries as CSCR blocks")
    p.add_argument("--from", dest="from_", type=int, default=0)
    p.add_argument("--to", type=int, default=None)
    p.add_argument("--full", action="store_true", help="full 64-hex hashes")
    p.add_argument("--log", default=None, help="log file (default: <state>/ilk.log)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_cscr)

    p = sub.add_parser("verify-log", parents=[common], help="audit an ilk.log or a CSCR export")
    p.add_argument("file")
    p.add_argument("--unit-key", default=None, help="unit public key (hex or file)")
    p.add_argument("--log", default=None, help="structured log to cross-check a CSCR export against")
    p.set_defaults(func=cmd_verify_log)

    bench = sub.add_parser("bench", parents=[common], help="experiments")
    bsub = bench.add_subparsers(dest="bench_command", metavar="EXPERIMENT", parser_class=_Parser)
    bsub.required = True
    p = bsub.add_parser("tamper", parents=[common])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fsync", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_tamper)
    p = bsub.add_parser("compare", parents=[common])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=10_000)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--tampers", type=int, default=1, help="tamper injections per run")
    p.add_argument("--no-fsync", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.state = getattr(args, "state", None)
    args.pretty = getattr(args, "pretty", False)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aegis: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BootHalt as exc:
        print(f"HALT({exc.reason})", file=sys.stderr)
        return EXIT_VERIFY
    except AegisError as exc:
        print(f"aegis: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
