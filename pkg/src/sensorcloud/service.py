"""Service-domain runtime: request access, collect wrapped keys, fetch and verify items.

Also the sample app, a rolling average over one stream.  Run without a
subcommand to use it::

    sensorcloud-service --cloud-endpoint 127.0.0.1:7000 --identity-file svc.json \\
        --stream alice/temp --window 5
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import secrets
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from cryptography.hazmat.primitives.asymmetric import x25519

from sensorcloud import canonical, wire
from sensorcloud.domain import ReadingView
from sensorcloud.errors import (
    BadRequest,
    IntegrityFailure,
    MissingKey,
    NotRegistered,
    SensorCloudError,
    UnwrapError,
)
from sensorcloud.link import CloudLink, RemoteCloudLink
from sensorcloud.objsec import (
    ChainCursor,
    ProtectedDataItem,
    StreamKey,
    WrappedKeySet,
    try_open,
    unwrap_keys,
    verify_chain,
)
from sensorcloud.transport import Identity

log = logging.getLogger("sensorcloud.service")

Coord = tuple[str, str, int]  # (owner_id, stream_id, epoch)


@dataclass
class AccessRequest:
    request_id: str
    owner_id: str
    streams: list[str]
    epoch_start: int
    epoch_end: int | None
    status: str = "Pending"
    grant_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"epoch_end": self.epoch_end, "epoch_start": self.epoch_start, "grant_id": self.grant_id,
                "owner_id": self.owner_id, "request_id": self.request_id, "status": self.status,
                "streams": self.streams}


@dataclass
class ServiceKeyRing:
    """Everything a service instance holds: its key pair, unwrapped stream keys, chain cursors."""

    transport: Identity
    instance_key: x25519.X25519PrivateKey
    instance_id: str | None = None
    keys: dict[Coord, StreamKey] = field(default_factory=dict)
    cursors: dict[Coord, ChainCursor] = field(default_factory=dict)
    requests: dict[str, AccessRequest] = field(default_factory=dict)
    path: Path | None = None

    @classmethod
    def create(cls, role: str, path: Path | None = None) -> "ServiceKeyRing":
        return cls(Identity.generate(role), x25519.X25519PrivateKey.generate(), path=path)

    @property
    def public_key_hex(self) -> str:
        return self.instance_key.public_key().public_bytes_raw().hex()

    def add_wrapped(self, wks: WrappedKeySet) -> list[StreamKey]:
        if self.instance_id is None or wks.grantee_instance_id != self.instance_id:
            raise UnwrapError(f"key set addressed to {wks.grantee_instance_id}, not {self.instance_id}")
        got = unwrap_keys(wks, self.instance_key)
        for k in got:
            self.keys[(k.owner_id, k.stream_id, k.epoch)] = k
        return got

    def key(self, owner_id: str, stream_id: str, epoch: int) -> StreamKey:
        k = self.keys.get((owner_id, stream_id, epoch))
        if k is None:
            raise MissingKey(f"no key for {owner_id}/{stream_id} epoch {epoch}")
        return k

    def epochs(self, owner_id: str, stream_id: str) -> list[int]:
        return sorted(e for o, s, e in self.keys if (o, s) == (owner_id, stream_id))

    def to_dict(self) -> dict[str, Any]:
        return {
            "cursors": [[o, s, e, c.to_dict()] for (o, s, e), c in sorted(self.cursors.items())],
            "instance_id": self.instance_id,
            "instance_key": self.instance_key.private_bytes_raw().hex(),
            "keys": [[o, s, e, k.key_bytes.hex()] for (o, s, e), k in sorted(self.keys.items())],
            "requests": [r.to_dict() for r in self.requests.values()],
            "transport": self.transport.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], path: Path | None = None) -> "ServiceKeyRing":
        ring = cls(
            Identity.from_dict(d["transport"]),
            x25519.X25519PrivateKey.from_private_bytes(bytes.fromhex(d["instance_key"])),
            d.get("instance_id"),
            path=path,
        )
        for o, s, e, kh in d.get("keys", []):
            ring.keys[(o, s, e)] = StreamKey(o, s, e, bytes.fromhex(kh))
        for o, s, e, c in d.get("cursors", []):
            ring.cursors[(o, s, e)] = ChainCursor.from_dict(c)
        for r in d.get("requests", []):
            ring.requests[r["request_id"]] = AccessRequest(**r)
        return ring

    @classmethod
    def load(cls, path: Path) -> "ServiceKeyRing":
        return cls.from_dict(json.loads(Path(path).read_text()), Path(path))

    def save(self) -> None:
        if self.path is None:
            return
        tmp = self.path.with_suffix(".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
        os.replace(tmp, self.path)


class ServiceClient:
    def __init__(self, keyring: ServiceKeyRing, link: CloudLink):
        self.ring = keyring
        self.link = link

    def register(self, manifest: str) -> str:
        reply = self.link.call({"manifest": manifest, "public_key": self.ring.public_key_hex,
                                "type": wire.REGISTER}, wire.REGISTER_ACK)
        self.ring.instance_id = reply["instance_id"]
        self.ring.save()
        return self.ring.instance_id

    def _instance(self) -> str:
        if self.ring.instance_id is None:
            raise NotRegistered("register this instance first")
        return self.ring.instance_id

    def request_access(self, owner_id: str, streams: Iterable[str], epoch_start: int = 0,
                       epoch_end: int | None = 0, purpose: str = "") -> str:
        """Ask the owner's trust point for access; returns the id to poll."""
        iid = self._instance()
        streams = sorted(set(streams))
        if not streams:
            raise BadRequest("request names no streams")
        if epoch_start < 0 or (epoch_end is not None and epoch_end < epoch_start):
            raise BadRequest("epoch range is empty")
        rid = "req-" + secrets.token_hex(6)
        body = {"epoch_end": epoch_end, "epoch_start": epoch_start, "instance_id": iid,
                "kind": wire.GRANT_REQUEST, "owner_id": owner_id, "purpose": purpose,
                "request_id": rid, "streams": streams}
        self.link.call({"body": canonical.dumps_str(body), "from_instance": iid,
                        "to": wire.trust_point_address(owner_id), "type": wire.RELAY}, wire.RELAY_ACK)
        self.ring.requests[rid] = AccessRequest(rid, owner_id, streams, epoch_start, epoch_end)
        self.ring.save()
        return rid

    def poll(self, request_id: str | None = None) -> str | dict[str, str]:
        """Drain the relay inbox; return one request's status, or all of them."""
        iid = self._instance()
        reply = self.link.call({"address": wire.instance_address(iid), "type": wire.FETCH_INBOX}, wire.INBOX)
        for env in reply["messages"]:
            self._absorb(env)
        self.ring.save()
        if request_id is not None:
            if request_id not in self.ring.requests:
                raise BadRequest(f"unknown request {request_id!r}")
            return self.ring.requests[request_id].status
        return {r.request_id: r.status for r in self.ring.requests.values()}

    def _absorb(self, env: dict[str, Any]) -> None:
        try:
            body = canonical.loads(env["body"])
        except ValueError:
            log.warning("dropping unreadable relay message from %s", env.get("from"))
            return
        kind = body.get("kind") if isinstance(body, dict) else None
        if kind == wire.GRANT_DECISION:
            for rid in body.get("request_ids", []):
                req = self.ring.requests.get(rid)
                if req is not None:
                    req.status = body["status"]
                    req.grant_id = body["grant_id"]
        elif kind == wire.WRAPPED_KEYS:
            try:
                got = self.ring.add_wrapped(WrappedKeySet.from_dict(body["keys"]))
                log.info("received %d keys for grant %s", len(got), body.get("grant_id"))
            except (UnwrapError, KeyError) as exc:
                log.warning("rejected wrapped key set: %s", exc)
        else:
            log.warning("ignoring relay message of kind %r", kind)

    def fetch_items(self, owner_id: str, stream_id: str, epochs: tuple[int, int]) -> list[ProtectedDataItem]:
        reply = self.link.call({"epochs": list(epochs), "instance_id": self.ring.instance_id,
                                "owner_id": owner_id, "stream_id": stream_id, "type": wire.QUERY},
                               wire.QUERY_RESULT)
        return [ProtectedDataItem.from_wire(w) for w in reply["items"]]

    def fetch_decrypt(self, owner_id: str, stream_id: str, epochs: tuple[int, int]) -> list[ReadingView]:
        lo, hi = epochs
        for e in range(lo, hi + 1):
            self.ring.key(owner_id, stream_id, e)  # MissingKey before touching the network
        items = self.fetch_items(owner_id, stream_id, epochs)
        cursors = {c: cur for c, cur in self.ring.cursors.items()
                   if c[0] == owner_id and c[1] == stream_id and lo <= c[2] <= hi}
        views = verify_chain(items, self.ring.key, cursors)
        # commit cursor advances only once the whole answer verified
        for it in items:
            h = it.header
            self.ring.cursors[(h.owner_id, h.stream_id, h.epoch)] = ChainCursor(h.seq, it.auth_tag)
        self.ring.save()
        return views


def decrypt_offline(items: Iterable[ProtectedDataItem], ring: ServiceKeyRing) -> tuple[int, int]:
    """Try every held key on every item; returns (opened, failed)."""
    held = [k.key_bytes for k in ring.keys.values()]
    opened = failed = 0
    for it in items:
        for kb in held:
            try:
                try_open(it, kb)
                opened += 1
                break
            except IntegrityFailure:
                continue
        else:
            failed += 1
    return opened, failed


def rolling_average(values: list[float], window: int) -> list[float]:
    """Mean over each window of ``window`` consecutive values; the head uses what is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        out.append(math.fsum(chunk) / len(chunk))
    return out


def sample_app_rolling_average(client: ServiceClient, owner_id: str, stream_id: str, window: int,
                               epochs: tuple[int, int] | None = None) -> list[float]:
    if epochs is None:
        held = client.ring.epochs(owner_id, stream_id)
        if not held:
            raise MissingKey(f"no keys for {owner_id}/{stream_id}")
        epochs = (held[0], held[-1])
    views = client.fetch_decrypt(owner_id, stream_id, epochs)
    values = []
    for v in views:
        if isinstance(v.value, bytes):
            raise BadRequest("rolling average needs numeric readings")
        values.append(float(v.value))
    return rolling_average(values, window)


# --- CLI -------------------------------------------------------------------------


def _split_stream(text: str, ring: ServiceKeyRing) -> tuple[str, str]:
    if "/" in text:
        owner, stream = text.split("/", 1)
        return owner, stream
    owners = {o for o, s, _ in ring.keys if s == text} | {r.owner_id for r in ring.requests.values()}
    if len(owners) != 1:
        raise BadRequest(f"say which owner's stream: OWNER/{text}")
    return owners.pop(), text


def _epochs(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    lo, _, hi = text.partition("..")
    return int(lo), int(hi or lo)


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="sensorcloud-service",
                                description="Service instance client and rolling-average sample app.")
    p.add_argument("--cloud-endpoint", help="cloud host:port")
    p.add_argument("--identity-file", required=True, help="JSON keyring for this instance")
    p.add_argument("--stream", help="OWNER/STREAM for the sample app")
    p.add_argument("--window", type=int, default=5, help="rolling-average window")
    p.add_argument("--epochs", help="LO..HI (default: every epoch we hold keys for)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd")
    sp = sub.add_parser("init", help="create a fresh identity file")
    sp.add_argument("--role", required=True, help="transport role, e.g. service:acme")
    sp.add_argument("--pin-cloud", required=True, help="cloud transport public key (hex)")
    sp = sub.add_parser("register", help="register this instance with the cloud")
    sp.add_argument("--manifest", default="")
    sp = sub.add_parser("request", help="ask an owner for access")
    sp.add_argument("owner")
    sp.add_argument("streams", nargs="+")
    sp.add_argument("--from-epoch", type=int, default=0)
    sp.add_argument("--to-epoch", help="last epoch, or 'open' for open-ended", default="0")
    sp.add_argument("--purpose", default="")
    sp = sub.add_parser("poll", help="collect decisions and keys")
    sp.add_argument("request_id", nargs="?")
    sub.add_parser("fetch", help="fetch, verify and print views of --stream as JSON lines")
    sp = sub.add_parser("decrypt-offline", help="try held keys on an item log obtained out of band")
    sp.add_argument("log", help="newline-delimited JSON items")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s service %(levelname)s %(message)s")

    path = Path(args.identity_file)
    if args.cmd == "init":
        ring = ServiceKeyRing.create(args.role, path)
        ring.transport.pin("cloud", args.pin_cloud)
        ring.save()
        print(json.dumps({"public_key": ring.public_key_hex,
                          "transport_key": ring.transport.public_bytes.hex()}, sort_keys=True))
        return 0
    ring = ServiceKeyRing.load(path)
    try:
        if args.cmd == "decrypt-offline":
            items = [ProtectedDataItem.from_bytes(line) for line in Path(args.log).read_bytes().splitlines()
                     if line.strip()]
            opened, failed = decrypt_offline(items, ring)
            print(json.dumps({"failed": failed, "opened": opened}, sort_keys=True))
            return 0
        if not args.cloud_endpoint:
            p.error("--cloud-endpoint is required")
        client = ServiceClient(ring, RemoteCloudLink(ring.transport, args.cloud_endpoint))
        if args.cmd == "register":
            print(client.register(args.manifest))
        elif args.cmd == "request":
            end = None if args.to_epoch == "open" else int(args.to_epoch)
            print(client.request_access(args.owner, args.streams, args.from_epoch, end, args.purpose))
        elif args.cmd == "poll":
            res = client.poll(args.request_id)
            print(res if isinstance(res, str) else json.dumps(res, sort_keys=True))
        elif args.cmd == "fetch":
            owner, stream = _split_stream(_need_stream(p, args), ring)
            epochs = _epochs(args.epochs) or _held_range(ring, owner, stream)
            for v in client.fetch_decrypt(owner, stream, epochs):
                print(canonical.dumps_str(v.to_dict()))
        else:
            owner, stream = _split_stream(_need_stream(p, args), ring)
            for avg in sample_app_rolling_average(client, owner, stream, args.window, _epochs(args.epochs)):
                print(repr(avg))
    except SensorCloudError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    return 0


def _need_stream(p: argparse.ArgumentParser, args: argparse.Namespace) -> str:
    if not args.stream:
        p.error("--stream is required")
    return args.stream


def _held_range(ring: ServiceKeyRing, owner: str, stream: str) -> tuple[int, int]:
    held = ring.epochs(owner, stream)
    if not held:
        raise MissingKey(f"no keys for {owner}/{stream}")
    return held[0], held[-1]


if __name__ == "__main__":
    sys.exit(main())
