"""Trust-point daemon: device ingest listener, owner command socket, cloud sync loop.

Device ingest (TCP, Home network only), one JSON object per line::

    -> {"credential": "<hex>", "reading": {...}}
    <- {"ok": true} | {"ok": false, "error": "UnauthorizedDevice", "message": "..."}

Owner command socket (Unix domain socket), one JSON object per line::

    -> {"cmd": "list-pending", "args": {}}
    <- {"ok": true, "data": ...} | {"ok": false, "error": {"code": ..., "message": ...}}
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socketserver
import sys
import threading
from pathlib import Path
from typing import Any, Callable

from sensorcloud import canonical
from sensorcloud.domain import SensorReading
from sensorcloud.errors import BadRequest, InvalidReading, SensorCloudError
from sensorcloud.link import RemoteCloudLink
from sensorcloud.transport import Identity, parse_endpoint
from sensorcloud.trustpoint import TrustPoint

log = logging.getLogger("sensorcloud.trustpoint")


def _grant_row(g) -> dict[str, Any]:
    return {
        "epochs": g.range_text(),
        "grant_id": g.grant_id,
        "instance_id": g.instance_id,
        "purpose": g.purpose,
        "requested_at": g.requested_at,
        "status": g.status.value,
        "streams": list(g.streams),
        "unknown_streams": list(g.unknown_streams),
    }


def command_table(tp: TrustPoint) -> dict[str, Callable[[dict[str, Any]], Any]]:
    def need(args: dict[str, Any], name: str) -> str:
        v = args.get(name)
        if not isinstance(v, str) or not v:
            raise BadRequest(f"missing argument {name!r}")
        return v

    def since(args: dict[str, Any]) -> int:
        v = args.get("since", 0)
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise BadRequest("since must be a non-negative integer")
        return v

    def grant(args):
        wks = tp.approve_grant(need(args, "grant_id"))
        g = tp.grants[args["grant_id"]]
        return {"grant_id": g.grant_id, "keys": sorted(wks.coverage()) if wks else [],
                "status": g.status.value}

    def deny(args):
        tp.deny_grant(need(args, "grant_id"))
        return {"grant_id": args["grant_id"], "status": "Denied"}

    def revoke(args):
        epochs = tp.revoke_grant(need(args, "grant_id"))
        return {"grant_id": args["grant_id"], "new_epochs": epochs, "status": "Revoked"}

    def policy(args):
        p = tp.set_policy(need(args, "stream"), need(args, "field"), need(args, "mode"))
        return {"policy": p.to_dict(), "stream": args["stream"]}

    return {
        "status": lambda args: tp.status(),
        "streams": lambda args: tp.streams_view(),
        "list-pending": lambda args: [_grant_row(g) for g in tp.pending()],
        "grants": lambda args: [_grant_row(g) for g in tp.grants.values()],
        "grant": grant,
        "deny": deny,
        "revoke": revoke,
        "audit": lambda args: [r.to_dict() for r in tp.audit.since(since(args))],
        "policy": policy,
        "sync": lambda args: tp.sync(),
    }


def execute(table: dict[str, Callable], request: Any) -> dict[str, Any]:
    try:
        if not isinstance(request, dict) or not isinstance(request.get("cmd"), str):
            raise BadRequest("request must be an object with a cmd")
        fn = table.get(request["cmd"])
        if fn is None:
            raise BadRequest(f"unknown command {request['cmd']!r}")
        args = request.get("args") or {}
        if not isinstance(args, dict):
            raise BadRequest("args must be an object")
        return {"data": fn(args), "ok": True}
    except SensorCloudError as exc:
        return {"error": {"code": exc.code, "message": str(exc)}, "ok": False}


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                req = json.loads(line)
            except ValueError:
                req = None
            reply = self.server.respond(req)  # type: ignore[attr-defined]
            try:
                self.wfile.write(canonical.dumps(reply) + b"\n")
                self.wfile.flush()
            except OSError:
                return


class CommandServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True

    def __init__(self, path: str, tp: TrustPoint):
        if os.path.exists(path):
            os.unlink(path)
        self.table = command_table(tp)
        super().__init__(path, _LineHandler)
        os.chmod(path, 0o600)

    def respond(self, req: Any) -> dict[str, Any]:
        return execute(self.table, req)


class IngestServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], tp: TrustPoint):
        self.tp = tp
        super().__init__(address, _LineHandler)

    def respond(self, req: Any) -> dict[str, Any]:
        try:
            if not isinstance(req, dict):
                raise BadRequest("expected {credential, reading}")
            cred = bytes.fromhex(str(req.get("credential", "")))
            reading = SensorReading.from_dict(req.get("reading"))
            self.tp.ingest_reading(cred, reading)
            return {"ok": True}
        except (ValueError, TypeError, KeyError) as exc:
            err: SensorCloudError = InvalidReading(str(exc))
        except SensorCloudError as exc:
            err = exc
        return {"error": err.code, "message": str(err), "ok": False}


class SyncLoop(threading.Thread):
    def __init__(self, tp: TrustPoint, interval: float):
        super().__init__(daemon=True)
        self.tp = tp
        self.interval = interval
        self.stop = threading.Event()

    def run(self) -> None:
        while not self.stop.wait(self.interval):
            try:
                res = self.tp.sync()
                if res["error"]:
                    log.info("sync incomplete: %s", res["error"])
            except SensorCloudError as exc:
                log.warning("sync failed: %s", exc)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="sensorcloud-trustpoint", description="Run the Home-domain trust point.")
    p.add_argument("--config", required=True)
    p.add_argument("--state-dir", help="override state_dir from the config")
    p.add_argument("--command-socket", help="override command_socket from the config")
    p.add_argument("--ingest-listen", help="override ingest_listen host:port")
    p.add_argument("--cloud-endpoint", help="override cloud_endpoint host:port")
    p.add_argument("--sync-interval", type=float, help="seconds between cloud syncs (0 disables)")
    p.add_argument("--port-file", help="write the ingest port here once listening")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s trust-point %(levelname)s %(message)s")

    cfg = json.loads(Path(args.config).read_text())
    endpoint = args.cloud_endpoint or cfg["cloud_endpoint"]
    link = RemoteCloudLink(Identity.from_dict(cfg["identity"]), endpoint)
    state_dir = args.state_dir or cfg.get("state_dir")
    tp = TrustPoint.from_config(cfg, link, state_dir=Path(state_dir) if state_dir else None)

    sock_path = args.command_socket or cfg["command_socket"]
    commands = CommandServer(sock_path, tp)
    ingest = IngestServer(parse_endpoint(args.ingest_listen or cfg.get("ingest_listen", "127.0.0.1:0")), tp)
    interval = args.sync_interval if args.sync_interval is not None else cfg.get("sync_interval", 1.0)
    loop = SyncLoop(tp, interval)
    for srv in (commands, ingest):
        threading.Thread(target=srv.serve_forever, daemon=True).start()
    if interval > 0:
        loop.start()
    port = ingest.server_address[1]
    if args.port_file:
        tmp = Path(args.port_file + ".tmp")
        tmp.write_text(str(port))
        tmp.replace(args.port_file)
    print(f"trust point for {tp.owner_id}: ingest 127.0.0.1:{port}, commands {sock_path}",
          file=sys.stderr, flush=True)

    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    loop.stop.set()
    for srv in (commands, ingest):
        srv.shutdown()
        srv.server_close()
    link.close()
    try:
        os.unlink(sock_path)
    except OSError:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
