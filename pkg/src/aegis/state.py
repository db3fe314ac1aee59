"""On-disk layout of one governed unit and the wiring that boots a gate from it.

    <state>/
      charter.iepl            active policy (canonical encoding)
      policies/<hash>.iepl    every sealed version, for offline re-validation
      genesis.lock            current trust root; locks/<digest>.lock history
      hw.salt                 host identity salt
      unit.key                unit runtime signing key
      auctor.pub              founding authority public key
      client.key              default egress client key (clients/<id>.pub)
      validators.json         roster: ids, public keys, behaviours
      validators/<id>/        signing.key and inbox/
      ilk.log                 the chained log
      certificates/           shutdown certificates by digest
      proposals/ ballots/     amendment lifecycle
      config.json             thresholds, ports, roster path
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Mapping

from filelock import FileLock

from . import crypto
from .canonical import canonical_dumps, canonical_loads
from .certificate import ShutdownCertificate
from .ekm import Gate
from .errors import AegisError, BootHalt, MalformedDocument
from .eva import Scorer
from .genesis import LOCK_FILE, GenesisLock, HardwareIdentity, declare_genesis
from .iepl import AmendmentProposal, PolicyDocument, load_charter, save_charter, seal
from .ilk import ILK_FILE, EkmResult, IlkWriter, read_log
from .senatus import Behavior, Inbox, Senatus, SimulatedNetwork, ValidatorAgent, ValidatorPool, pool_for_epoch

DEFAULT_CONFIG: dict[str, Any] = {
    "host": "127.0.0.1",
    "port": 0,
    "integrity_interval": 100,
    "unattested_threshold": 3,
    "fsync": True,
    "roster": "validators.json",
    "pool_seed": 0,
    # episodes from a lockdown to the first COMMIT after redeclaration
    "recovery_bound_episodes": 1,
}

STATE_ENV = "AEGIS_STATE_DIR"


class AlreadyDeclared(AegisError):
    """A trust root already exists in this state directory."""


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def count_decisions(records) -> int:
    return sum(
        1
        for r in records
        if r["type"] == "entry"
        and r["ekm_result"] != EkmResult.GOVERN.value
        and r["action_category"] != "ekm.lockdown"
    )


class StateDirectory:
    def __init__(self, path: str | os.PathLike, *, hostname: str | None = None):
        self.path = Path(path)
        self.hostname = hostname

    # -- paths -------------------------------------------------------------

    @property
    def charter_path(self) -> Path:
        return self.path / "charter.iepl"

    @property
    def lock_path(self) -> Path:
        return self.path / LOCK_FILE

    @property
    def ilk_path(self) -> Path:
        return self.path / ILK_FILE

    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    def file_lock(self, timeout: float = 5.0) -> FileLock:
        self.path.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path / ".writer.lock"), timeout=timeout)

    @property
    def declared(self) -> bool:
        return self.lock_path.exists()

    def config(self) -> dict[str, Any]:
        cfg = dict(DEFAULT_CONFIG)
        if self.config_path.exists():
            cfg.update(canonical_loads(self.config_path.read_bytes()))
        return cfg

    # -- provisioning --------------------------------------------------------

    def init(
        self,
        charter: PolicyDocument,
        auctor_key,
        *,
        roster_size: int | None = None,
        behaviors: Mapping[str, Any] | None = None,
        config: Mapping[str, Any] | None = None,
    ) -> GenesisLock:
        """Declare the trust root for a fresh unit."""
        if self.declared:
            raise AlreadyDeclared(f"{self.lock_path} exists; a unit has exactly one trust root")
        self.path.mkdir(parents=True, exist_ok=True)
        cfg = {**DEFAULT_CONFIG, **(config or {})}
        _write_atomic(self.config_path, canonical_dumps(cfg))
        hw = HardwareIdentity.provision(self.path, self.hostname)

        crypto.save_key(crypto.generate_key(), self.path / "unit.key")
        client = crypto.generate_key()
        crypto.save_key(client, self.path / "client.key")
        (self.path / "clients").mkdir(exist_ok=True)
        (self.path / "clients" / "default.pub").write_text(crypto.public_hex(client) + "\n")

        n = roster_size or charter.quorum_config.n_validators
        roster = []
        for i in range(1, n + 1):
            vid = f"auctor-{i}"
            key = crypto.generate_key()
            crypto.save_key(key, self.path / "validators" / vid / "signing.key")
            (self.path / "validators" / vid / "inbox").mkdir(parents=True, exist_ok=True)
            behavior = Behavior.parse((behaviors or {}).get(vid))
            roster.append({"validator_id": vid, "public_key": crypto.public_hex(key), "behavior": behavior.to_dict()})
        _write_atomic(self.path / cfg["roster"], canonical_dumps({"validators": roster}))

        self.archive_policy(charter)
        save_charter(charter, self.charter_path)
        (self.path / "auctor.pub").write_text(crypto.public_hex(auctor_key) + "\n")
        lock = declare_genesis(
            hw,
            seal(charter),
            auctor_key,
            {v["validator_id"]: v["public_key"] for v in roster},
            charter.quorum_config.quorum_q,
        )
        self.write_lock(lock)
        IlkWriter(self.ilk_path, fsync=cfg["fsync"]).close()
        return lock

    def archive_policy(self, doc: PolicyDocument) -> Path:
        target = self.path / "policies" / f"{seal(doc)}.iepl"
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            save_charter(doc, target)
        return target

    def policy_by_hash(self, policy_hash: str) -> PolicyDocument:
        return load_charter(self.path / "policies" / f"{policy_hash}.iepl")

    def write_lock(self, lock: GenesisLock) -> None:
        data = lock.dumps()
        _write_atomic(self.path / "locks" / f"{lock.digest()}.lock", data)
        _write_atomic(self.lock_path, data)

    def load_lock(self) -> GenesisLock:
        return GenesisLock.loads(self.lock_path.read_bytes())

    def lock_history(self) -> dict[str, GenesisLock]:
        out = {}
        for p in (self.path / "locks").glob("*.lock"):
            lock = GenesisLock.loads(p.read_bytes())
            out[lock.digest()] = lock
        return out

    def hardware(self) -> HardwareIdentity:
        return HardwareIdentity.probe(self.path, self.hostname)

    def unit_key(self):
        return crypto.load_key(self.path / "unit.key")

    def unit_public_key(self) -> str:
        return crypto.public_hex(self.unit_key())

    def trusted_auctor(self) -> str:
        return (self.path / "auctor.pub").read_text().strip()

    def client_keys(self) -> dict[str, str]:
        return {p.stem: p.read_text().strip() for p in (self.path / "clients").glob("*.pub")}

    # -- validators ----------------------------------------------------------

    def roster(self) -> list[dict[str, Any]]:
        data = canonical_loads((self.path / self.config()["roster"]).read_bytes())
        return list(data["validators"])

    def validators(self) -> dict[str, ValidatorAgent]:
        agents = {}
        for entry in self.roster():
            vid = entry["validator_id"]
            agents[vid] = ValidatorAgent(
                validator_id=vid,
                signing_key=crypto.load_key(self.path / "validators" / vid / "signing.key"),
                behavior=Behavior.parse(entry.get("behavior")),
                inbox=Inbox(self.path / "validators" / vid / "inbox"),
            )
        return agents

    def set_behavior(self, validator_id: str, behavior: Behavior) -> None:
        path = self.path / self.config()["roster"]
        data = canonical_loads(path.read_bytes())
        for entry in data["validators"]:
            if entry["validator_id"] == validator_id:
                entry["behavior"] = behavior.to_dict()
        _write_atomic(path, canonical_dumps(data))

    def pool(self, decisions_count: int, policy: PolicyDocument) -> ValidatorPool:
        cfg = policy.quorum_config
        ids = [v["validator_id"] for v in self.roster()]
        epoch = decisions_count // cfg.epoch_length
        return pool_for_epoch(ids, cfg.n_validators, self.config()["pool_seed"], epoch)

    def senatus(self, gate: Gate, network: SimulatedNetwork | None = None) -> Senatus:
        return Senatus(
            self.validators(),
            gate.pool,
            gate.live_policy.quorum_config,
            Inbox(self.path / "ballots"),
            network,
        )

    # -- proposals -----------------------------------------------------------

    def save_proposal(self, proposal: AmendmentProposal) -> Path:
        path = self.path / "proposals" / f"{proposal.proposal_id}.json"
        _write_atomic(path, canonical_dumps(proposal.to_dict()))
        return path

    def load_proposal(self, proposal_id: str) -> AmendmentProposal:
        path = self.path / "proposals" / f"{proposal_id}.json"
        return AmendmentProposal.from_dict(canonical_loads(path.read_bytes()))

    def save_result(self, proposal_id: str, result: Mapping[str, Any]) -> Path:
        path = self.path / "proposals" / f"{proposal_id}.result.json"
        _write_atomic(path, canonical_dumps(dict(result)))
        return path

    def load_result(self, proposal_id: str) -> dict[str, Any] | None:
        path = self.path / "proposals" / f"{proposal_id}.result.json"
        return canonical_loads(path.read_bytes()) if path.exists() else None

    # -- boot ----------------------------------------------------------------

    def _probe_charter(self) -> str:
        try:
            return seal(load_charter(self.charter_path))
        except (OSError, MalformedDocument, ValueError) as exc:
            return f"unreadable:{type(exc).__name__}"

    def _broadcast(self, cert: ShutdownCertificate) -> None:
        message = {"type": "shutdown", "certificate": cert.to_dict()}
        _write_atomic(self.path / "certificates" / f"{cert.digest()}.json", canonical_dumps(cert.to_dict()))
        for vid in cert.broadcast_targets:
            Inbox(self.path / "validators" / vid / "inbox").put(message)

    def certificate_path(self, cert: ShutdownCertificate) -> Path:
        return self.path / "certificates" / f"{cert.digest()}.json"

    def _on_policy_change(self, doc: PolicyDocument, lock: GenesisLock) -> None:
        self.archive_policy(doc)
        self.write_lock(lock)
        save_charter(doc, self.charter_path)

    def load_gate(self, *, scorer: Scorer | None = None, fsync: bool | None = None) -> Gate:
        """Boot: verify the trust root against this host and charter, then open the gate.

        Raises :class:`~aegis.errors.BootHalt` when verification fails.
        """
        cfg = self.config()
        lock = self.load_lock()
        try:
            policy = load_charter(self.charter_path)
        except (OSError, MalformedDocument, ValueError):
            raise BootHalt("CharterUnreadable") from None
        prior = self.lock_history().get(lock.redeclaration_of) if lock.redeclaration_of else None
        ilk = IlkWriter(self.ilk_path, fsync=cfg["fsync"] if fsync is None else fsync)
        decisions = count_decisions(read_log(self.ilk_path))
        try:
            return Gate(
                policy,
                lock,
                self.hardware(),
                self.unit_key(),
                ilk,
                prior_lock=prior,
                trusted_auctor=self.trusted_auctor(),
                scorer=scorer,
                pool=self.pool(decisions, policy),
                decisions_count=decisions,
                integrity_interval=cfg["integrity_interval"],
                charter_probe=self._probe_charter,
                broadcast=self._broadcast,
                on_policy_change=self._on_policy_change,
            )
        except Exception:
            ilk.close()
            raise
