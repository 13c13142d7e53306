"""sensorcloud-owner: the data owner's command line for a running trust point."""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from datetime import datetime, timezone
from typing import Any, Sequence

from sensorcloud.errors import CommandRejected, SocketUnavailable

DEFAULT_SOCKET = "trustpoint.sock"


class OwnerClient:
    def __init__(self, path: str, timeout: float = 30.0):
        self.path = path
        self.timeout = timeout

    def request(self, cmd: str, **args: Any) -> Any:
        try:
            s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            s.settimeout(self.timeout)
            s.connect(self.path)
        except OSError as exc:
            raise SocketUnavailable(f"cannot reach trust point at {self.path}: {exc}") from None
        with s, s.makefile("rwb") as fh:
            fh.write(json.dumps({"args": args, "cmd": cmd}, sort_keys=True).encode() + b"\n")
            fh.flush()
            line = fh.readline()
        if not line:
            raise SocketUnavailable("trust point closed the connection")
        reply = json.loads(line)
        if not reply.get("ok"):
            err = reply.get("error") or {}
            raise CommandRejected(err.get("code", "Error"), err.get("message", ""))
        return reply.get("data")


# --- rendering -------------------------------------------------------------------


def table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(c) for c in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines)


def _ts(ms: int | None) -> str:
    if ms is None:
        return "-"
    return datetime.fromtimestamp(ms / 1000, timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def _policy(p: dict[str, Any]) -> str:
    ts = p["timestamp_mode"]
    if ts == "coarsened":
        ts += f":{p['granularity_ms']}"
    return f"timestamp={ts} location={p['location_mode']} unit={p['unit_mode']}"


def _status(d: dict[str, Any]) -> str:
    flow = d["flow"]
    sync = d.get("last_sync") or {}
    lines = [
        f"owner          {d['owner_id']}",
        f"devices        {d['devices']}",
        f"streams        {d['streams']}",
        f"upload queue   {d['queue']}",
        f"control queue  {d['outbox']}",
        "grants         " + " ".join(f"{k.lower()}={v}" for k, v in d["grants"].items()),
        f"outbound       {flow['messages']} messages, {flow['plaintext_bearing']} blocked",
        "last sync      " + (f"{_ts(sync.get('at'))} {'ok' if not sync.get('error') else 'error: ' + sync['error']}"
                             if sync else "never"),
    ]
    return "\n".join(lines)


def _pending(rows: list[dict[str, Any]]) -> str:
    if not rows:
        return "no pending requests"
    return table(
        ["GRANT", "INSTANCE", "STREAMS", "EPOCHS", "REQUESTED", "PURPOSE", "NOTE"],
        [[r["grant_id"], r["instance_id"], ",".join(r["streams"]) or "-", r["epochs"], _ts(r["requested_at"]),
          r["purpose"] or "-", ("unknown: " + ",".join(r["unknown_streams"])) if r["unknown_streams"] else ""]
         for r in rows],
    )


def render(verb: str, data: Any) -> str:
    if verb == "status":
        return _status(data)
    if verb == "streams":
        return table(["STREAM", "EPOCH", "NEXT_SEQ", "DEVICE", "POLICY"],
                     [[r["stream_id"], r["epoch"], r["next_seq"], r["device"] or "-", _policy(r["policy"])]
                      for r in data])
    if verb == "list-pending":
        return _pending(data)
    if verb == "grant":
        keys = ", ".join(f"{s}@{e}" for s, e in data["keys"]) or "none yet"
        return f"approved {data['grant_id']} (keys delivered: {keys})"
    if verb == "deny":
        return f"denied {data['grant_id']}"
    if verb == "revoke":
        moved = ", ".join(f"{s} -> epoch {e}" for s, e in sorted(data["new_epochs"].items()))
        return f"revoked {data['grant_id']} ({moved})"
    if verb == "audit":
        if not data:
            return "no audit records"
        return table(["SEQ", "TIME", "ACTOR", "ACTION", "SUBJECT", "DETAIL"],
                     [[r["audit_seq"], _ts(r["timestamp"]), r["actor"], r["action"], r["subject"] or "-",
                       r["detail"]] for r in data])
    if verb == "policy":
        return f"policy for {data['stream']}: {_policy(data['policy'])}"
    raise ValueError(verb)


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sensorcloud-owner", description="Inspect and control your trust point.")
    p.add_argument("--socket", default=os.environ.get("SENSORCLOUD_SOCKET", DEFAULT_SOCKET),
                   help="trust-point command socket (env SENSORCLOUD_SOCKET)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("status", help="summary of the trust point")
    sub.add_parser("streams", help="streams with epoch and protection policy")
    sub.add_parser("list-pending", help="access requests awaiting a decision")
    for verb, text in (("grant", "approve a pending request"), ("deny", "deny a pending request"),
                       ("revoke", "revoke an approved grant and rotate its streams")):
        sp = sub.add_parser(verb, help=text)
        sp.add_argument("grant_id")
    sp = sub.add_parser("audit", help="show audit records")
    sp.add_argument("--since", type=int, default=0, metavar="SEQ")
    sp = sub.add_parser("policy", help="change one field's protection mode for a stream")
    sp.add_argument("stream")
    sp.add_argument("field", choices=["timestamp", "location", "unit", "value"])
    sp.add_argument("mode", help="plain | encrypted | coarsened:<ms> | dropped")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    client = OwnerClient(args.socket)
    verb = args.verb
    req: dict[str, Any] = {}
    if verb in ("grant", "deny", "revoke"):
        req = {"grant_id": args.grant_id}
    elif verb == "audit":
        req = {"since": args.since}
    elif verb == "policy":
        req = {"field": args.field, "mode": args.mode, "stream": args.stream}
    try:
        data = client.request(verb, **req)
    except CommandRejected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SocketUnavailable as exc:
        print(f"error: SocketUnavailable: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(data, sort_keys=True, indent=2))
    else:
        print(render(verb, data))
    return 0


if __name__ == "__main__":
    sys.exit(main())
