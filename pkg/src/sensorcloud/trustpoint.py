"""The Home-border gateway: protects readings, uploads them, adjudicates grants.

Nothing leaves this object except through :meth:`TrustPoint._send`, which runs
every outbound message past a :class:`FlowGuard`.  Plaintext readings never
reach the upload queue; the queue holds :class:`ProtectedDataItem` only.
"""

from __future__ import annotations

import base64
import collections
import enum
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from sensorcloud import canonical, wire
from sensorcloud.cloud import GrantRegistryEntry
from sensorcloud.domain import (
    CLOUD,
    HOME,
    AuditLog,
    DeviceRegistration,
    DeviceRegistry,
    ItemState,
    ProtectionPolicy,
    SensorReading,
    validate_flow,
)
from sensorcloud.errors import (
    BadRequest,
    FlowViolation,
    MalformedItem,
    MalformedKey,
    MissingGranteeKey,
    NotApproved,
    NotPending,
    SensorCloudError,
    TransportDown,
    UnknownGrant,
    UnknownStream,
)
from sensorcloud.link import CloudLink
from sensorcloud.objsec import (
    GENESIS_TAG,
    KeyStore,
    ProtectedDataItem,
    SequenceGuard,
    StreamKey,
    WrappedKeySet,
    load_public_key,
    protect,
    wrap_keys,
)

log = logging.getLogger(__name__)

OWNER = "owner"
SELF = "trust-point"


class GrantStatus(str, enum.Enum):
    PENDING = "Pending"
    APPROVED = "Approved"
    DENIED = "Denied"
    REVOKED = "Revoked"


ALLOWED_TRANSITIONS = frozenset({
    (GrantStatus.PENDING, GrantStatus.APPROVED),
    (GrantStatus.PENDING, GrantStatus.DENIED),
    (GrantStatus.APPROVED, GrantStatus.REVOKED),
})


@dataclass
class GrantRecord:
    """One grant through its whole life; ``status`` Pending makes it a pending grant."""

    grant_id: str
    instance_id: str
    streams: list[str]
    epoch_start: int
    epoch_end: int | None
    requested_at: int
    purpose: str = ""
    status: GrantStatus = GrantStatus.PENDING
    decided_at: int | None = None
    request_ids: list[str] = field(default_factory=list)
    unknown_streams: list[str] = field(default_factory=list)
    grantee_public_key: str | None = None
    requested_streams: list[str] = field(default_factory=list)

    def covers(self, stream_id: str, epoch: int) -> bool:
        return (stream_id in self.streams and epoch >= self.epoch_start
                and (self.epoch_end is None or epoch <= self.epoch_end))

    def transition(self, new: GrantStatus, now: int) -> None:
        if (self.status, new) not in ALLOWED_TRANSITIONS:
            err = NotPending if new in (GrantStatus.APPROVED, GrantStatus.DENIED) else NotApproved
            raise err(f"grant {self.grant_id} is {self.status.value}, cannot become {new.value}")
        self.status = new
        self.decided_at = now

    def range_text(self) -> str:
        return f"{self.epoch_start}..{'*' if self.epoch_end is None else self.epoch_end}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "decided_at": self.decided_at,
            "epoch_end": self.epoch_end,
            "epoch_start": self.epoch_start,
            "grant_id": self.grant_id,
            "grantee_public_key": self.grantee_public_key,
            "instance_id": self.instance_id,
            "purpose": self.purpose,
            "request_ids": list(self.request_ids),
            "requested_at": self.requested_at,
            "requested_streams": list(self.requested_streams),
            "status": self.status.value,
            "streams": list(self.streams),
            "unknown_streams": list(self.unknown_streams),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GrantRecord":
        return cls(
            d["grant_id"], d["instance_id"], list(d["streams"]), d["epoch_start"], d["epoch_end"],
            d["requested_at"], d.get("purpose", ""), GrantStatus(d["status"]), d.get("decided_at"),
            list(d.get("request_ids", [])), list(d.get("unknown_streams", [])),
            d.get("grantee_public_key"), list(d.get("requested_streams", d["streams"])),
        )


class FlowGuard:
    """Inspects every serialized message on its way out of the Home domain.

    A message is plaintext-bearing if it is not structurally one of the known
    protected shapes, or if it contains any registered needle (key bytes,
    planted sentinels) in raw, hex or base64 form.  Such messages are counted
    and blocked.
    """

    _ALLOWED = {wire.STORE, wire.RELAY, wire.FETCH_INBOX, wire.LOOKUP_SERVICE,
                wire.GRANT_UPSERT, wire.GRANT_REMOVE, wire.QUERY}

    def __init__(self, needles: Iterable[bytes] = ()):
        self.messages = 0
        self.plaintext_bearing = 0
        self.by_type: collections.Counter[str] = collections.Counter()
        self._forms: set[bytes] = set()
        self._lock = threading.Lock()
        for n in needles:
            self.add_needle(n)

    def add_needle(self, needle: bytes) -> None:
        if len(needle) < 8:
            raise ValueError("needles shorter than 8 bytes would match by accident")
        with self._lock:
            self._forms.update({needle, needle.hex().encode(), needle.hex().upper().encode(),
                                base64.b64encode(needle).rstrip(b"=")})

    def _state(self, msg: dict[str, Any]) -> ItemState:
        t = msg.get("type")
        if t not in self._ALLOWED:
            return ItemState.PLAINTEXT
        if t == wire.STORE:
            if set(msg) != {"type", "item"}:
                return ItemState.PLAINTEXT
            try:
                ProtectedDataItem.from_wire(msg["item"])
            except MalformedItem:
                return ItemState.PLAINTEXT
        if t == wire.RELAY:
            try:
                body = canonical.loads(msg.get("body", ""))
            except ValueError:
                return ItemState.PLAINTEXT
            if not isinstance(body, dict) or body.get("kind") not in wire.RELAY_KINDS:
                return ItemState.PLAINTEXT
        return ItemState.PROTECTED

    def check(self, msg: dict[str, Any]) -> bytes:
        data = canonical.dumps(msg)
        state = self._state(msg)
        with self._lock:
            hit = next((f for f in self._forms if f in data), None)
            self.messages += 1
            self.by_type[str(msg.get("type"))] += 1
            if hit is not None or not validate_flow(state, HOME, CLOUD):
                self.plaintext_bearing += 1
                raise FlowViolation(f"blocked outbound {msg.get('type')} message "
                                    f"({'needle match' if hit else 'not protected'})")
        return data

    def stats(self) -> dict[str, Any]:
        with self._lock:
            return {"by_type": dict(sorted(self.by_type.items())), "messages": self.messages,
                    "plaintext_bearing": self.plaintext_bearing}


def _now_ms() -> int:
    return int(time.time() * 1000)


class TrustPoint:
    def __init__(
        self,
        owner_id: str,
        master_secret: bytes,
        devices: Iterable[DeviceRegistration] = (),
        policies: dict[str, ProtectionPolicy] | None = None,
        link: CloudLink | None = None,
        *,
        state_dir: Path | None = None,
        clock: Callable[[], int] = _now_ms,
        flow_needles: Iterable[bytes] = (),
    ):
        self.owner_id = owner_id
        self.registry = DeviceRegistry(devices)
        self.policies: dict[str, ProtectionPolicy] = dict(policies or {})
        self.link = link
        self.clock = clock
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.flow = FlowGuard(flow_needles)
        self._lock = threading.RLock()
        self._sync_lock = threading.Lock()

        streams = set(self.registry.streams()) | set(self.policies)
        self.keystore = KeyStore(owner_id, master_secret)
        self.guard = SequenceGuard()
        self.last_tags: dict[str, bytes] = {}
        self.uploads: collections.deque[tuple[int, ProtectedDataItem]] = collections.deque()
        self._next_upload = 0
        self._acked_upto = 0
        self.outbox: list[dict[str, Any]] = []
        self.grants: dict[str, GrantRecord] = {}
        self._grant_counter = 0
        self.delivered: dict[str, set[tuple[str, int]]] = {}
        self.last_sync: dict[str, Any] = {}
        self._backlog: list[dict[str, Any]] = []

        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self.audit = AuditLog(self.state_dir / "audit.ndjson")
            self._load(streams)
        else:
            self.audit = AuditLog()
        for s in sorted(streams):
            self.keystore.add_stream(s)
            self.policies.setdefault(s, ProtectionPolicy())
        for s in self.keystore.streams():
            self._key(s)

    # --- persistence ---------------------------------------------------------

    @property
    def _state_path(self) -> Path:
        assert self.state_dir is not None
        return self.state_dir / "state.json"

    @property
    def _journal_path(self) -> Path:
        assert self.state_dir is not None
        return self.state_dir / "uploads.ndjson"

    def _load(self, streams: set[str]) -> None:
        if self._state_path.exists():
            st = json.loads(self._state_path.read_text())
            for s, e in st["epochs"].items():
                self.keystore.add_stream(s, e)
            self.guard = SequenceGuard(st["guard"])
            self.last_tags = {k: bytes.fromhex(v) for k, v in st["last_tags"].items()}
            self.policies.update({s: ProtectionPolicy.from_dict(p) for s, p in st["policies"].items()})
            self.grants = {g["grant_id"]: GrantRecord.from_dict(g) for g in st["grants"]}
            self._grant_counter = st["grant_counter"]
            self.delivered = {i: {(s, e) for s, e in v} for i, v in st["delivered"].items()}
            self.outbox = st["outbox"]
            self._acked_upto = self._next_upload = st["acked_upto"]
        if self._journal_path.exists():
            nxt = self.guard.snapshot()
            for line in self._journal_path.read_bytes().splitlines():
                if not line.strip():
                    continue
                rec = canonical.loads(line)
                item = ProtectedDataItem.from_wire(rec["item"])
                # the journal is written before state.json, so it may be ahead
                h = item.header
                if nxt.get(h.key_id, 0) <= h.seq:
                    nxt[h.key_id] = h.seq + 1
                    self.last_tags[h.key_id] = item.auth_tag
                if rec["n"] >= self._acked_upto:
                    self.uploads.append((rec["n"], item))
                    self._next_upload = rec["n"] + 1
            self.guard = SequenceGuard(nxt)

    def _persist(self) -> None:
        if self.state_dir is None:
            return
        st = {
            "acked_upto": self._acked_upto,
            "delivered": {i: sorted(v) for i, v in sorted(self.delivered.items())},
            "epochs": self.keystore.epochs(),
            "grant_counter": self._grant_counter,
            "grants": [g.to_dict() for g in self.grants.values()],
            "guard": self.guard.snapshot(),
            "last_tags": {k: v.hex() for k, v in sorted(self.last_tags.items())},
            "outbox": self.outbox,
            "policies": {s: p.to_dict() for s, p in sorted(self.policies.items())},
        }
        tmp = self._state_path.with_suffix(".tmp")
        tmp.write_bytes(canonical.dumps(st))
        os.replace(tmp, self._state_path)

    def _journal(self, n: int, item: ProtectedDataItem) -> None:
        if self.state_dir is not None:
            with self._journal_path.open("ab") as fh:
                fh.write(canonical.dumps({"item": item.to_wire(), "n": n}) + b"\n")

    # --- helpers -------------------------------------------------------------

    def _key(self, stream_id: str, epoch: int | None = None) -> StreamKey:
        k = self.keystore.key(stream_id, epoch)
        self.flow.add_needle(k.key_bytes)
        return k

    def _send(self, msg: dict[str, Any], expect: str | None = None) -> dict[str, Any]:
        self.flow.check(msg)
        if self.link is None:
            raise TransportDown("no cloud link configured")
        return self.link.call(msg, expect)

    def _grant(self, grant_id: str) -> GrantRecord:
        g = self.grants.get(grant_id)
        if g is None:
            raise UnknownGrant(f"no grant {grant_id!r}")
        return g

    def _relay(self, instance_id: str, body: dict[str, Any]) -> None:
        self.outbox.append({"body": canonical.dumps_str(body), "to": wire.instance_address(instance_id),
                            "type": wire.RELAY})

    def _decision(self, g: GrantRecord) -> dict[str, Any]:
        return {"epoch_end": g.epoch_end, "epoch_start": g.epoch_start, "grant_id": g.grant_id,
                "kind": wire.GRANT_DECISION, "request_ids": list(g.request_ids),
                "status": g.status.value, "streams": list(g.streams)}

    def _deliver(self, g: GrantRecord, pairs: list[tuple[str, int]]) -> WrappedKeySet | None:
        """Wrap keys for ``pairs`` to the grantee and queue them for relay."""
        if not pairs:
            return None
        if not g.grantee_public_key:
            raise MissingGranteeKey(f"no public key cached for {g.instance_id}")
        try:
            pub = load_public_key(g.grantee_public_key)
        except MalformedKey as exc:
            raise MissingGranteeKey(str(exc)) from None
        wks = wrap_keys([self._key(s, e) for s, e in pairs], pub, grant_id=g.grant_id,
                        grantee_instance_id=g.instance_id, owner_id=self.owner_id)
        self._relay(g.instance_id, {"grant_id": g.grant_id, "keys": wks.to_dict(), "kind": wire.WRAPPED_KEYS})
        self.delivered.setdefault(g.instance_id, set()).update(pairs)
        return wks

    # --- data path -------------------------------------------------------------

    def ingest_reading(self, credential: bytes, reading: SensorReading) -> bool:
        with self._lock:
            try:
                self.registry.authorize(credential, reading.device_id, reading.stream_id)
                key = self._key(reading.stream_id)
            except SensorCloudError as exc:
                self.audit.append(self.clock(), f"device:{reading.device_id}", "ingest-rejected",
                                  reading.stream_id, exc.code)
                raise
            kid = key.key_id
            item = protect(reading, self.policies[reading.stream_id], key,
                           self.last_tags.get(kid, GENESIS_TAG), self.guard.expected(kid), guard=self.guard)
            self.last_tags[kid] = item.auth_tag
            self._enqueue(item)
            return True

    def _enqueue(self, item: ProtectedDataItem) -> None:
        if not isinstance(item, ProtectedDataItem):
            raise FlowViolation("only protected items may be queued for upload")
        n = self._next_upload
        self._next_upload += 1
        self._journal(n, item)
        self.uploads.append((n, item))
        self._persist()

    @property
    def queue_length(self) -> int:
        return len(self.uploads)

    def flush_uploads(self) -> int:
        """Send queued items in order until the queue is empty or the link fails."""
        sent = 0
        with self._sync_lock:
            while True:
                with self._lock:
                    if not self.uploads:
                        break
                    n, item = self.uploads[0]
                try:
                    self._send({"item": item.to_wire(), "type": wire.STORE}, wire.STORE_ACK)
                except TransportDown as exc:
                    if sent == 0:
                        raise TransportDown(str(exc), uploaded=0) from None
                    break
                with self._lock:
                    self.uploads.popleft()
                    self._acked_upto = n + 1
                    sent += 1
                    if not self.uploads:
                        self._persist()
                        if self.state_dir is not None:
                            self._journal_path.write_bytes(b"")
            with self._lock:
                self._persist()
        return sent

    def flush_control(self) -> int:
        sent = 0
        with self._sync_lock:
            while True:
                with self._lock:
                    if not self.outbox:
                        break
                    msg = self.outbox[0]
                try:
                    self._send(msg)
                except TransportDown:
                    break
                except SensorCloudError as exc:
                    # the cloud refused (e.g. the instance vanished); nothing to retry
                    log.warning("cloud rejected %s: %s", msg["type"], exc)
                    self.audit.append(self.clock(), SELF, "control-rejected", msg["type"], exc.code)
                with self._lock:
                    self.outbox.pop(0)
                    sent += 1
                    self._persist()
        return sent

    def poll_inbox(self) -> list[GrantRecord]:
        reply = self._send({"address": wire.trust_point_address(self.owner_id), "type": wire.FETCH_INBOX},
                           wire.INBOX)
        # fetched messages are gone from the cloud; keep any we could not process yet
        backlog, self._backlog = self._backlog + reply["messages"], []
        out = []
        for i, env in enumerate(backlog):
            try:
                body = canonical.loads(env["body"])
                if not isinstance(body, dict) or body.get("kind") != wire.GRANT_REQUEST:
                    raise BadRequest("not a grant request")
                out.append(self.handle_grant_request(body, sender=env.get("from")))
            except TransportDown:
                self._backlog = backlog[i:]
                raise
            except SensorCloudError as exc:
                self.audit.append(self.clock(), str(env.get("from")), "request-rejected", "", exc.code)
            except ValueError:
                self.audit.append(self.clock(), str(env.get("from")), "request-rejected", "", "BadRequest")
        return out

    def sync(self) -> dict[str, Any]:
        """One round of cloud exchange: control messages, uploads, then the inbox."""
        result: dict[str, Any] = {"control": 0, "requests": 0, "uploaded": 0, "error": None}
        try:
            result["control"] = self.flush_control()
            result["uploaded"] = self.flush_uploads()
            result["requests"] = len(self.poll_inbox())
            result["control"] += self.flush_control()
        except TransportDown as exc:
            result["error"] = str(exc)
        result["at"] = self.clock()
        self.last_sync = result
        return result

    # --- grants ----------------------------------------------------------------

    def handle_grant_request(self, request: dict[str, Any], sender: str | None = None) -> GrantRecord:
        try:
            instance_id = request["instance_id"]
            request_id = request["request_id"]
            streams = request["streams"]
            start = request["epoch_start"]
            end = request.get("epoch_end")
            purpose = str(request.get("purpose", ""))
        except (KeyError, TypeError):
            raise BadRequest("grant request is missing fields") from None
        ints_ok = (isinstance(start, int) and not isinstance(start, bool) and start >= 0
                   and (end is None or (isinstance(end, int) and not isinstance(end, bool) and end >= start)))
        if (not isinstance(instance_id, str) or not isinstance(request_id, str) or not ints_ok
                or not isinstance(streams, list) or not streams or not all(isinstance(s, str) for s in streams)):
            raise BadRequest("malformed grant request")
        if sender is not None and sender != wire.instance_address(instance_id):
            raise BadRequest(f"request for {instance_id} arrived from {sender}")
        requested = sorted(set(streams))
        with self._lock:
            for g in self.grants.values():
                if (g.status is GrantStatus.PENDING and g.instance_id == instance_id
                        and g.requested_streams == requested and (g.epoch_start, g.epoch_end) == (start, end)):
                    if request_id not in g.request_ids:
                        g.request_ids.append(request_id)
                    self._persist()
                    return g
        info = self._send({"instance_id": instance_id, "type": wire.LOOKUP_SERVICE}, wire.SERVICE_INFO)
        with self._lock:
            known = set(self.keystore.streams())
            self._grant_counter += 1
            g = GrantRecord(
                grant_id=f"G{self._grant_counter}", instance_id=instance_id,
                streams=[s for s in requested if s in known], epoch_start=start, epoch_end=end,
                requested_at=self.clock(), purpose=purpose, request_ids=[request_id],
                unknown_streams=[s for s in requested if s not in known],
                grantee_public_key=info.get("public_key"), requested_streams=requested,
            )
            self.grants[g.grant_id] = g
            detail = f"streams={','.join(g.streams)} epochs={g.range_text()}"
            if g.unknown_streams:
                detail += f" unknown={','.join(g.unknown_streams)}"
            self.audit.append(g.requested_at, f"instance:{instance_id}", "grant-requested", g.grant_id, detail)
            self._persist()
            return g

    def pending(self) -> list[GrantRecord]:
        with self._lock:
            return [g for g in self.grants.values() if g.status is GrantStatus.PENDING]

    def approve_grant(self, grant_id: str) -> WrappedKeySet | None:
        with self._lock:
            g = self._grant(grant_id)
            if g.status is not GrantStatus.PENDING:
                raise NotPending(f"grant {grant_id} is {g.status.value}")
            pairs = [
                (s, e) for s in g.streams
                for e in range(g.epoch_start, self.keystore.current_epoch(s) + 1) if g.covers(s, e)
            ]
            if not g.grantee_public_key:
                raise MissingGranteeKey(f"no public key cached for {g.instance_id}")
            now = self.clock()
            g.transition(GrantStatus.APPROVED, now)
            entry = GrantRegistryEntry(g.grant_id, g.instance_id, self.owner_id, list(g.streams),
                                       g.epoch_start, g.epoch_end)
            self.outbox.append({"entry": entry.to_dict(), "type": wire.GRANT_UPSERT})
            self._relay(g.instance_id, self._decision(g))
            wks = self._deliver(g, pairs)
            self.audit.append(now, OWNER, "grant-approved", grant_id,
                              f"instance={g.instance_id} keys={len(pairs)}")
            self._persist()
            return wks

    def deny_grant(self, grant_id: str) -> None:
        with self._lock:
            g = self._grant(grant_id)
            now = self.clock()
            g.transition(GrantStatus.DENIED, now)
            self._relay(g.instance_id, self._decision(g))
            self.audit.append(now, OWNER, "grant-denied", grant_id, f"instance={g.instance_id}")
            self._persist()

    def revoke_grant(self, grant_id: str) -> dict[str, int]:
        """Revoke and rotate every stream in the grant; returns the new epoch per stream."""
        with self._lock:
            g = self._grant(grant_id)
            now = self.clock()
            g.transition(GrantStatus.REVOKED, now)
            self.outbox.append({"grant_id": grant_id, "type": wire.GRANT_REMOVE})
            self._relay(g.instance_id, self._decision(g))
            new_epochs = {s: self.keystore.rotate(s) for s in g.streams}
            self._push_rotation(new_epochs)
            detail = " ".join(f"{s}->{e}" for s, e in sorted(new_epochs.items()))
            self.audit.append(now, OWNER, "grant-revoked", grant_id, f"instance={g.instance_id} {detail}".strip())
            self._persist()
            return new_epochs

    def _push_rotation(self, new_epochs: dict[str, int]) -> None:
        for g in self.grants.values():
            if g.status is not GrantStatus.APPROVED:
                continue
            pairs = [(s, e) for s, e in sorted(new_epochs.items()) if g.covers(s, e)]
            try:
                self._deliver(g, pairs)
            except MissingGranteeKey as exc:
                self.audit.append(self.clock(), SELF, "key-push-failed", g.grant_id, str(exc))

    def rotate_stream(self, stream_id: str) -> int:
        with self._lock:
            new = self.keystore.rotate(stream_id)
            self._push_rotation({stream_id: new})
            self._persist()
            return new

    def set_policy(self, stream_id: str, field_name: str, mode: str) -> ProtectionPolicy:
        with self._lock:
            if stream_id not in self.policies:
                raise UnknownStream(f"no stream {stream_id!r}")
            new = self.policies[stream_id].with_field(field_name, mode)
            self.policies[stream_id] = new
            self.audit.append(self.clock(), OWNER, "policy-changed", stream_id, f"{field_name}={mode}")
            self._persist()
            return new

    # --- views for the command socket -------------------------------------------

    def status(self) -> dict[str, Any]:
        with self._lock:
            counts = collections.Counter(g.status.value for g in self.grants.values())
            return {
                "devices": len(self.registry),
                "flow": self.flow.stats(),
                "grants": {s.value: counts.get(s.value, 0) for s in GrantStatus},
                "last_sync": self.last_sync,
                "outbox": len(self.outbox),
                "owner_id": self.owner_id,
                "queue": len(self.uploads),
                "streams": len(self.keystore.streams()),
            }

    def streams_view(self) -> list[dict[str, Any]]:
        with self._lock:
            devices = self.registry.streams()
            rows = []
            for s in self.keystore.streams():
                key = self.keystore.key(s)
                rows.append({"device": devices.get(s, ""), "epoch": key.epoch,
                             "next_seq": self.guard.expected(key.key_id),
                             "policy": self.policies[s].to_dict(), "stream_id": s})
            return rows

    @classmethod
    def from_config(cls, config: dict[str, Any], link: CloudLink | None = None, **kw: Any) -> "TrustPoint":
        devices = [DeviceRegistration.from_dict(d) for d in config.get("devices", [])]
        policies = {s: ProtectionPolicy.from_dict(p) for s, p in config.get("policies", {}).items()}
        needles = [bytes.fromhex(n) for n in config.get("flow_needles", [])]
        return cls(config["owner_id"], canonical.unhex(config["master_secret"], 32), devices, policies,
                   link, flow_needles=needles, **kw)
