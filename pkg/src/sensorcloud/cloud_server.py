"""TCP daemon wrapping :class:`CloudPlatform`.

Config (JSON)::

    {"identity": {"role": "cloud", "signing_key": "...", "pins": {...}},
     "listen": "127.0.0.1:0", "data_dir": "...", "test_mode": false}
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import socket
import socketserver
import sys
import threading
from pathlib import Path

from sensorcloud import canonical, wire
from sensorcloud.cloud import CloudPlatform, Principal
from sensorcloud.errors import SensorCloudError, SessionClosed, TransportError
from sensorcloud.transport import Identity, handshake_responder, parse_endpoint, role_kind, role_subject

log = logging.getLogger("sensorcloud.cloud")

HANDSHAKE_TIMEOUT = 10.0
IDLE_TIMEOUT = 600.0


class CloudServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], identity: Identity, platform: CloudPlatform):
        self.identity = identity
        self.platform = platform
        super().__init__(address, _Handler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class _Handler(socketserver.BaseRequestHandler):
    server: CloudServer

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(HANDSHAKE_TIMEOUT)
        try:
            session = handshake_responder(self.server.identity, sock)
        except TransportError as exc:
            log.warning("handshake from %s rejected: %s", self.client_address, exc)
            return
        sock.settimeout(IDLE_TIMEOUT)
        principal = Principal(session.peer_role)
        platform = self.server.platform
        log.info("session %s opened for %s", session.session_id.hex()[:12], principal.role)
        try:
            while True:
                body = session.recv_frame()
                platform.record_transcript(session.session_id, "in", body)
                try:
                    reply = platform.handle(principal, wire.decode(body))
                except SensorCloudError as exc:
                    reply = wire.error_body(exc)
                out = canonical.dumps(reply)
                platform.record_transcript(session.session_id, "out", out)
                session.send_frame(out)
        except SessionClosed as exc:
            level = logging.WARNING if exc.code != "SessionClosed" else logging.INFO
            log.log(level, "session %s for %s ended: %s: %s", session.session_id.hex()[:12],
                    principal.role, exc.code, exc)
        finally:
            session.close()


def build(config: dict, *, data_dir: str | None = None, test_mode: bool | None = None) -> CloudServer:
    identity = Identity.from_dict(config["identity"])
    owners = {role_subject(r) for r in identity.pins if role_kind(r) == "trust-point"}
    d = data_dir or config.get("data_dir")
    platform = CloudPlatform(
        Path(d) if d else None,
        test_mode=bool(config.get("test_mode", False) if test_mode is None else test_mode),
        known_owners=owners,
    )
    return CloudServer(parse_endpoint(config.get("listen", "127.0.0.1:0")), identity, platform)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="sensorcloud-cloud", description="Run the cloud storage and relay daemon.")
    p.add_argument("--config", required=True, help="JSON config with identity, listen, data_dir")
    p.add_argument("--data-dir", help="override data_dir from the config")
    p.add_argument("--listen", help="override listen host:port")
    p.add_argument("--test-mode", action="store_true", help="enable state dumps and transcripts")
    p.add_argument("--port-file", help="write the bound port here once listening")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s cloud %(levelname)s %(message)s")

    config = json.loads(Path(args.config).read_text())
    if args.listen:
        config["listen"] = args.listen
    server = build(config, data_dir=args.data_dir, test_mode=True if args.test_mode else None)
    if args.port_file:
        tmp = Path(args.port_file + ".tmp")
        tmp.write_text(str(server.server_address[1]))
        tmp.replace(args.port_file)
    print(f"cloud listening on {server.endpoint}", file=sys.stderr, flush=True)
    signal.signal(signal.SIGTERM, lambda *_: threading.Thread(target=server.shutdown).start())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
