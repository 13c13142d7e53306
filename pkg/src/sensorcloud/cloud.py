"""Cloud-domain platform: stores sealed items, registers services, relays grant traffic.

The cloud never holds stream keys.  It checks items for structural
well-formedness only; tags are the grantee's business.  Authorization for
queries comes from the grant registry, which mirrors the trust point's
approved grants and loses every tie (no entry, no access).

Persistence is a directory of newline-delimited JSON files::

    streams/<digest>.ndjson   one canonical item per line, append-only
    services.ndjson           service registrations
    grants.ndjson             grant registry upserts/removals

In-memory indexes are rebuilt from these files at startup.  Relay inboxes are
transient.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from sensorcloud import canonical, wire
from sensorcloud.errors import (
    AccessDenied,
    BadRequest,
    DisabledInProduction,
    MalformedItem,
    NotRegistered,
    NotTrustPointSession,
    SensorCloudError,
    UnknownAddressee,
    UnknownService,
    UnknownStream,
)
from sensorcloud.objsec import ProtectedDataItem, derive_key_id, load_public_key
from sensorcloud.transport import role_kind, role_subject

log = logging.getLogger(__name__)

TRUST_POINT = "trust-point"
SERVICE = "service"
OPERATOR = "cloud"


@dataclass(frozen=True)
class Principal:
    """Who is on the other end of an authenticated session."""

    role: str

    @property
    def kind(self) -> str:
        return role_kind(self.role)

    @property
    def subject(self) -> str:
        return role_subject(self.role)


@dataclass
class ServiceRecord:
    instance_id: str
    public_key: str
    manifest: str
    principal: str
    registered_at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "manifest": self.manifest,
            "principal": self.principal,
            "public_key": self.public_key,
            "registered_at": self.registered_at,
        }


@dataclass
class GrantRegistryEntry:
    grant_id: str
    instance_id: str
    owner_id: str
    streams: list[str]
    epoch_start: int
    epoch_end: int | None  # None: open-ended (auto-renew)
    active: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "active": self.active,
            "epoch_end": self.epoch_end,
            "epoch_start": self.epoch_start,
            "grant_id": self.grant_id,
            "instance_id": self.instance_id,
            "owner_id": self.owner_id,
            "streams": sorted(self.streams),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GrantRegistryEntry":
        try:
            end = d["epoch_end"]
            entry = cls(str(d["grant_id"]), str(d["instance_id"]), str(d["owner_id"]),
                        [str(s) for s in d["streams"]], int(d["epoch_start"]),
                        None if end is None else int(end), bool(d.get("active", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"malformed grant entry: {exc}") from None
        if entry.epoch_start < 0 or (entry.epoch_end is not None and entry.epoch_end < entry.epoch_start):
            raise BadRequest("grant epoch range is empty or negative")
        return entry


@dataclass
class StreamLog:
    owner_id: str
    stream_id: str
    items: dict[tuple[int, int], bytes] = field(default_factory=dict)
    _order: list[tuple[int, int]] | None = None

    def append(self, epoch: int, seq: int, raw: bytes) -> bool:
        if (epoch, seq) in self.items:
            return False
        self.items[(epoch, seq)] = raw
        self._order = None
        return True

    def ordered(self) -> list[tuple[int, int]]:
        if self._order is None:
            self._order = sorted(self.items)
        return self._order


def _covered(ranges: list[tuple[int, int | None]], lo: int, hi: int) -> bool:
    """Is every integer in [lo, hi] inside the union of ``ranges`` (None = unbounded)?"""
    need = lo
    for start, end in sorted(ranges, key=lambda r: r[0]):
        if start > need:
            break
        if end is None or end >= need:
            if end is None or end >= hi:
                return True
            need = end + 1
    return False


def _stream_file(owner_id: str, stream_id: str) -> str:
    return hashlib.sha256(canonical.dumps([owner_id, stream_id])).hexdigest()[:32] + ".ndjson"


class CloudPlatform:
    def __init__(self, data_dir: Path | None = None, *, test_mode: bool = False,
                 known_owners: set[str] | None = None, clock: Callable[[], float] = time.time):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.test_mode = test_mode
        self.known_owners = set(known_owners or ())
        self._clock = clock
        self._lock = threading.RLock()
        self.logs: dict[tuple[str, str], StreamLog] = {}
        self.services: dict[str, ServiceRecord] = {}
        self.grants: dict[str, GrantRegistryEntry] = {}
        self.inboxes: dict[str, list[dict[str, Any]]] = {}
        self.transcripts: list[dict[str, Any]] = []
        if self.data_dir is not None:
            (self.data_dir / "streams").mkdir(parents=True, exist_ok=True)
            self._load()

    # --- persistence ---------------------------------------------------------

    def _append_line(self, rel: str, line: bytes) -> None:
        if self.data_dir is None:
            return
        with (self.data_dir / rel).open("ab") as fh:
            fh.write(line + b"\n")

    def _load(self) -> None:
        assert self.data_dir is not None
        for path in sorted((self.data_dir / "streams").glob("*.ndjson")):
            for lineno, line in enumerate(path.read_bytes().splitlines()):
                if not line.strip():
                    continue
                try:
                    h = canonical.loads(line)["header"]
                    key = (h["owner_id"], h["stream_id"])
                    epoch, seq = int(h["epoch"]), int(h["seq"])
                except (ValueError, KeyError, TypeError):
                    log.warning("skipping unreadable record %s:%d", path.name, lineno)
                    continue
                self.logs.setdefault(key, StreamLog(*key)).append(epoch, seq, line)
        svc = self.data_dir / "services.ndjson"
        if svc.exists():
            for line in svc.read_bytes().splitlines():
                if line.strip():
                    d = canonical.loads(line)
                    self.services[d["instance_id"]] = ServiceRecord(**d)
        grants = self.data_dir / "grants.ndjson"
        if grants.exists():
            for line in grants.read_bytes().splitlines():
                if not line.strip():
                    continue
                ev = canonical.loads(line)
                if ev["op"] == "upsert":
                    entry = GrantRegistryEntry.from_dict(ev["entry"])
                    self.grants[entry.grant_id] = entry
                else:
                    self.grants.pop(ev["grant_id"], None)

    # --- operations ----------------------------------------------------------

    def store_item(self, principal: Principal, item_wire: Any) -> dict[str, Any]:
        if principal.kind != TRUST_POINT:
            raise NotTrustPointSession(f"{principal.role} may not store items")
        item = ProtectedDataItem.from_wire(item_wire)
        h = item.header
        if h.owner_id != principal.subject:
            raise NotTrustPointSession(f"trust point for {principal.subject!r} cannot store for {h.owner_id!r}")
        if h.key_id != derive_key_id(h.owner_id, h.stream_id, h.epoch):
            raise MalformedItem("key_id does not match the item coordinates")
        raw = item.to_bytes()
        with self._lock:
            slog = self.logs.get((h.owner_id, h.stream_id))
            if slog is None:
                slog = self.logs[(h.owner_id, h.stream_id)] = StreamLog(h.owner_id, h.stream_id)
            fresh = slog.append(h.epoch, h.seq, raw)
            if fresh:
                self._append_line(f"streams/{_stream_file(h.owner_id, h.stream_id)}", raw)
        return {"duplicate": not fresh, "epoch": h.epoch, "owner_id": h.owner_id,
                "seq": h.seq, "stream_id": h.stream_id}

    def _owned_instance(self, principal: Principal, instance_id: Any) -> ServiceRecord:
        rec = self.services.get(instance_id) if isinstance(instance_id, str) else None
        if rec is None or rec.principal != principal.role:
            raise NotRegistered(f"instance {instance_id!r} is not registered to {principal.role}")
        return rec

    def authorized(self, principal: Principal, owner_id: str, stream_id: str, lo: int, hi: int,
                   instance_id: str | None = None) -> bool:
        if lo < 0 or hi < lo:
            return False
        if principal.kind == TRUST_POINT:
            return principal.subject == owner_id
        if principal.kind != SERVICE:
            return False
        rec = self.services.get(instance_id or "")
        if rec is None or rec.principal != principal.role:
            return False
        ranges = [
            (g.epoch_start, g.epoch_end)
            for g in self.grants.values()
            if g.active and g.instance_id == instance_id and g.owner_id == owner_id and stream_id in g.streams
        ]
        return _covered(ranges, lo, hi)

    def query_items(self, principal: Principal, owner_id: str, stream_id: str,
                    epochs: tuple[int, int], seqs: tuple[int, int] | None = None,
                    instance_id: str | None = None) -> list[bytes]:
        lo, hi = epochs
        with self._lock:
            if not self.authorized(principal, owner_id, stream_id, lo, hi, instance_id):
                raise AccessDenied(f"{principal.role} ({instance_id}) has no grant for {stream_id} epochs {lo}..{hi}")
            slog = self.logs.get((owner_id, stream_id))
            if slog is None:
                raise UnknownStream(f"no items stored for {owner_id}/{stream_id}")
            out = []
            for epoch, seq in slog.ordered():
                if lo <= epoch <= hi and (seqs is None or seqs[0] <= seq <= seqs[1]):
                    out.append(slog.items[(epoch, seq)])
            return out

    def register_service(self, principal: Principal, manifest: str, public_key: str) -> str:
        if principal.kind != SERVICE:
            raise AccessDenied("only service sessions register instances")
        if not isinstance(manifest, str):
            raise BadRequest("manifest must be a string")
        load_public_key(public_key if isinstance(public_key, str) else "")
        with self._lock:
            instance_id = "svc-" + secrets.token_hex(6)
            while instance_id in self.services:
                instance_id = "svc-" + secrets.token_hex(6)
            rec = ServiceRecord(instance_id, public_key, manifest, principal.role, int(self._clock() * 1000))
            self.services[instance_id] = rec
            self._append_line("services.ndjson", canonical.dumps(rec.to_dict()))
        return instance_id

    def lookup_service(self, principal: Principal, instance_id: str) -> dict[str, Any]:
        if principal.kind != TRUST_POINT:
            raise AccessDenied("only trust points look up services")
        rec = self.services.get(instance_id)
        if rec is None:
            raise UnknownService(f"no service instance {instance_id!r}")
        return {"instance_id": rec.instance_id, "manifest": rec.manifest, "public_key": rec.public_key}

    def _address_exists(self, address: str) -> bool:
        kind, _, ident = address.partition(":")
        if kind == "instance":
            return ident in self.services
        if kind == TRUST_POINT:
            return ident in self.known_owners
        return False

    def relay(self, principal: Principal, to: str, body: str, from_instance: str | None = None) -> None:
        if not isinstance(to, str) or not isinstance(body, str):
            raise BadRequest("relay needs string 'to' and 'body'")
        with self._lock:
            if principal.kind == TRUST_POINT:
                sender = wire.trust_point_address(principal.subject)
                if not to.startswith("instance:"):
                    raise AccessDenied("trust points relay only to service instances")
            elif principal.kind == SERVICE:
                sender = wire.instance_address(self._owned_instance(principal, from_instance).instance_id)
                if not to.startswith("trust-point:"):
                    raise AccessDenied("services relay only to trust points")
            else:
                raise AccessDenied(f"{principal.role} may not relay")
            if not self._address_exists(to):
                raise UnknownAddressee(f"no addressee {to!r}")
            self.inboxes.setdefault(to, []).append({"body": body, "from": sender, "to": to})

    def fetch_inbox(self, principal: Principal, address: str) -> list[dict[str, Any]]:
        kind, _, ident = address.partition(":") if isinstance(address, str) else ("", "", "")
        with self._lock:
            if kind == TRUST_POINT and principal.kind == TRUST_POINT and ident == principal.subject:
                pass
            elif kind == "instance" and principal.kind == SERVICE:
                self._owned_instance(principal, ident)
            else:
                raise AccessDenied(f"{principal.role} cannot read inbox {address!r}")
            return self.inboxes.pop(address, [])

    def upsert_grant(self, principal: Principal, entry: GrantRegistryEntry) -> None:
        if principal.kind != TRUST_POINT or entry.owner_id != principal.subject:
            raise NotTrustPointSession("only the owner's trust point manages its grants")
        with self._lock:
            if entry.instance_id not in self.services:
                raise UnknownService(f"no service instance {entry.instance_id!r}")
            existing = self.grants.get(entry.grant_id)
            if existing is not None and existing.owner_id != entry.owner_id:
                raise AccessDenied("grant id belongs to another owner")
            self.grants[entry.grant_id] = entry
            self._append_line("grants.ndjson", canonical.dumps({"entry": entry.to_dict(), "op": "upsert"}))

    def remove_grant(self, principal: Principal, grant_id: str) -> None:
        if principal.kind != TRUST_POINT:
            raise NotTrustPointSession("only the owner's trust point manages its grants")
        with self._lock:
            existing = self.grants.get(grant_id)
            if existing is None:
                return
            if existing.owner_id != principal.subject:
                raise NotTrustPointSession("grant belongs to another owner")
            del self.grants[grant_id]
            self._append_line("grants.ndjson", canonical.dumps({"grant_id": grant_id, "op": "remove"}))

    def record_transcript(self, session_id: bytes, direction: str, body: bytes) -> None:
        if self.test_mode:
            with self._lock:
                self.transcripts.append({"body": body.decode("utf-8", "replace"),
                                         "direction": direction, "session": session_id.hex()})

    def dump_state(self) -> dict[str, Any]:
        """Everything the cloud holds, for the curious-cloud byte scan."""
        if not self.test_mode:
            raise DisabledInProduction("state dumps are only available in test mode")
        with self._lock:
            files = {}
            if self.data_dir is not None:
                for p in sorted(self.data_dir.rglob("*")):
                    if p.is_file():
                        files[str(p.relative_to(self.data_dir))] = p.read_bytes().decode("utf-8", "replace")
            return {
                "files": files,
                "grants": [g.to_dict() for g in sorted(self.grants.values(), key=lambda g: g.grant_id)],
                "logs": {
                    f"{o}/{s}": [slog.items[k].decode() for k in slog.ordered()]
                    for (o, s), slog in sorted(self.logs.items())
                },
                "relay_queues": {a: list(msgs) for a, msgs in sorted(self.inboxes.items())},
                "services": [r.to_dict() for r in sorted(self.services.values(), key=lambda r: r.instance_id)],
                "transcripts": list(self.transcripts),
            }

    # --- wire dispatch -------------------------------------------------------

    def handle(self, principal: Principal, msg: dict[str, Any]) -> dict[str, Any]:
        t = msg.get("type")
        try:
            if t == wire.STORE:
                return {"type": wire.STORE_ACK, **self.store_item(principal, msg.get("item"))}
            if t == wire.QUERY:
                epochs = _range(msg.get("epochs"), "epochs")
                seqs = _range(msg["seqs"], "seqs") if msg.get("seqs") is not None else None
                raw = self.query_items(principal, _str(msg, "owner_id"), _str(msg, "stream_id"),
                                       epochs, seqs, msg.get("instance_id"))
                return {"items": [canonical.loads(r) for r in raw], "type": wire.QUERY_RESULT}
            if t == wire.REGISTER:
                iid = self.register_service(principal, msg.get("manifest", ""), msg.get("public_key"))
                return {"instance_id": iid, "type": wire.REGISTER_ACK}
            if t == wire.RELAY:
                self.relay(principal, msg.get("to"), msg.get("body"), msg.get("from_instance"))
                return {"type": wire.RELAY_ACK}
            if t == wire.FETCH_INBOX:
                return {"messages": self.fetch_inbox(principal, msg.get("address")), "type": wire.INBOX}
            if t == wire.LOOKUP_SERVICE:
                return {"type": wire.SERVICE_INFO, **self.lookup_service(principal, _str(msg, "instance_id"))}
            if t == wire.GRANT_UPSERT:
                self.upsert_grant(principal, GrantRegistryEntry.from_dict(msg.get("entry") or {}))
                return {"type": wire.OK}
            if t == wire.GRANT_REMOVE:
                self.remove_grant(principal, _str(msg, "grant_id"))
                return {"type": wire.OK}
            if t == wire.DUMP_STATE:
                if principal.kind != OPERATOR:
                    raise AccessDenied("only the cloud operator may dump state")
                return {"snapshot": self.dump_state(), "type": wire.STATE}
            raise BadRequest(f"unknown message type {t!r}")
        except SensorCloudError as exc:
            return wire.error_body(exc)


def _str(msg: dict[str, Any], name: str) -> str:
    v = msg.get(name)
    if not isinstance(v, str) or not v:
        raise BadRequest(f"{name} must be a non-empty string")
    return v


def _range(v: Any, name: str) -> tuple[int, int]:
    if (not isinstance(v, list) or len(v) != 2
            or any(isinstance(x, bool) or not isinstance(x, int) for x in v)):
        raise BadRequest(f"{name} must be [lo, hi] integers")
    return v[0], v[1]


__all__ = ["CloudPlatform", "GrantRegistryEntry", "Principal", "ServiceRecord"]
