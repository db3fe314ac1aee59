"""Loopback daemon: one canonical JSON request per line, one response per line.

Requests::

    {"type": "publish", "action": {...}, "attestation": {...}}
    {"type": "status"}
    {"type": "shutdown"}

Publishes go through the egress mediator, whose lock serializes them.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from pathlib import Path
from typing import Any, Mapping

from .canonical import canonical_dumps, canonical_loads
from .egress import Attestation, EgressMediator
from .errors import AegisError
from .eva import ActionProposal

PORT_FILE = "daemon.port"


class _Handler(socketserver.StreamRequestHandler):
    server: AegisServer

    def handle(self) -> None:
        for line in self.rfile:
            if not line.strip():
                continue
            response = self.server.dispatch(line)
            self.wfile.write(canonical_dumps(response) + b"\n")
            self.wfile.flush()
            if response.get("shutdown"):
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return


class AegisServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, mediator: EgressMediator, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.mediator = mediator

    @property
    def port(self) -> int:
        return self.server_address[1]

    def dispatch(self, line: bytes) -> dict[str, Any]:
        try:
            request = canonical_loads(line)
            kind = request.get("type")
            if kind == "publish":
                action = ActionProposal.from_dict(request.get("action"))
                outcome = self.mediator.mediate_egress(action, Attestation.from_dict(request.get("attestation")))
                return {"ok": True, "outcome": outcome.to_dict()}
            if kind == "status":
                return {"ok": True, "state": self.mediator.gate.state().to_dict(), "dropped": self.mediator.dropped}
            if kind == "shutdown":
                return {"ok": True, "shutdown": True}
            return {"ok": False, "error": f"unknown request type {kind!r}"}
        except (AegisError, ValueError, TypeError, AttributeError) as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def serve(mediator: EgressMediator, state_dir: str | Path, host: str = "127.0.0.1", port: int = 0) -> None:
    """Serve until a shutdown request arrives; the bound port is written to ``daemon.port``."""
    port_file = Path(state_dir) / PORT_FILE
    with AegisServer(mediator, host, port) as server:
        port_file.write_text(f"{host}:{server.port}\n")
        try:
            server.serve_forever()
        finally:
            port_file.unlink(missing_ok=True)


def request(address: tuple[str, int], message: Mapping[str, Any], timeout: float = 10.0) -> dict[str, Any]:
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(canonical_dumps(dict(message)) + b"\n")
        with sock.makefile("rb") as fh:
            line = fh.readline()
    if not line:
        raise ConnectionError("daemon closed the connection")
    return canonical_loads(line)


def running_daemon(state_dir: str | Path) -> tuple[str, int] | None:
    """Address of a live daemon for this state directory, if one answers."""
    port_file = Path(state_dir) / PORT_FILE
    if not port_file.exists():
        return None
    host, _, port = port_file.read_text().strip().rpartition(":")
    try:
        address = (host, int(port))
        with socket.create_connection(address, timeout=0.5):
            return address
    except (OSError, ValueError):
        return None
