import pytest
from cryptography.hazmat.primitives.asymmetric import x25519

from sensorcloud import canonical, wire
from sensorcloud.cloud import CloudPlatform, Principal
from sensorcloud.domain import DeviceRegistration, ProtectionPolicy, SensorReading
from sensorcloud.errors import (
    AccessDenied,
    FlowViolation,
    MissingGranteeKey,
    NotApproved,
    NotPending,
    TransportDown,
    UnauthorizedDevice,
    UnknownGrant,
    UnknownService,
    UnknownStream,
    VerificationError,
    WrongKey,
)
from sensorcloud.link import LocalCloudLink
from sensorcloud.objsec import (
    GENESIS_TAG,
    ProtectedDataItem,
    WrappedKeySet,
    derive_stream_key,
    unwrap_keys,
    verify_and_unprotect,
    verify_chain,
)
from sensorcloud.trustpoint import ALLOWED_TRANSITIONS, FlowGuard, GrantStatus, TrustPoint

MASTER = bytes(range(32))
CRED = bytes([7]) * 32
SVC = Principal("service:acme")


class FlakyLink(LocalCloudLink):
    """Fails every call after ``budget`` successful STOREs."""

    def __init__(self, platform, role, budget=None):
        super().__init__(platform, role)
        self.budget = budget
        self.stores = []

    def call(self, msg, expect=None):
        if msg["type"] == wire.STORE:
            if self.budget is not None and len(self.stores) >= self.budget:
                raise TransportDown("link dropped")
            self.stores.append((msg["item"]["header"]["epoch"], msg["item"]["header"]["seq"]))
        return super().call(msg, expect)


class World:
    def __init__(self, tmp_path=None, budget=None):
        self.cloud = CloudPlatform(None, test_mode=True, known_owners={"alice"})
        self.link = FlakyLink(self.cloud, "trust-point:alice", budget)
        devices = [DeviceRegistration("dev-1", CRED, {"s1", "s2"})]
        self.clock_ms = 1_000
        self.tp = TrustPoint("alice", MASTER, devices, {"s2": ProtectionPolicy(unit_mode="encrypted")},
                             self.link, state_dir=tmp_path, clock=lambda: self.clock_ms)
        self.svc_key = x25519.X25519PrivateKey.generate()
        self.iid = self.cloud.register_service(
            SVC, "rolling average", self.svc_key.public_key().public_bytes_raw().hex())

    def ingest(self, n, stream="s1", start=0):
        for i in range(start, start + n):
            self.tp.ingest_reading(CRED, SensorReading("dev-1", stream, 1_700_000_000_000 + i * 1000, float(i), "C"))

    def request(self, streams=("s1",), start=0, end=0, rid="r1"):
        body = {"epoch_end": end, "epoch_start": start, "instance_id": self.iid, "kind": wire.GRANT_REQUEST,
                "purpose": "avg", "request_id": rid, "streams": list(streams)}
        self.cloud.relay(SVC, "trust-point:alice", canonical.dumps_str(body), self.iid)

    def service_inbox(self):
        return [canonical.loads(m["body"]) for m in self.cloud.fetch_inbox(SVC, f"instance:{self.iid}")]

    def service_keys(self, msgs):
        keys = {}
        for m in msgs:
            if m["kind"] == wire.WRAPPED_KEYS:
                for k in unwrap_keys(WrappedKeySet.from_dict(m["keys"]), self.svc_key):
                    keys[(k.stream_id, k.epoch)] = k
        return keys


@pytest.fixture
def world():
    return World()


class TestIngest:
    def test_accepted_and_protected(self, world):
        assert world.tp.ingest_reading(CRED, SensorReading("dev-1", "s1", 5, 1.5, "C"))
        assert world.tp.queue_length == 1
        assert isinstance(world.tp.uploads[0][1], ProtectedDataItem)

    def test_wrong_credential_audited(self, world):
        with pytest.raises(UnauthorizedDevice):
            world.tp.ingest_reading(bytes(32), SensorReading("dev-1", "s1", 5, 1.5, "C"))
        assert world.tp.queue_length == 0
        rec = world.tp.audit.since(0)[-1]
        assert (rec.action, rec.detail) == ("ingest-rejected", "UnauthorizedDevice")

    def test_unregistered_stream(self, world):
        with pytest.raises(UnknownStream):
            world.tp.ingest_reading(CRED, SensorReading("dev-1", "s9", 5, 1.5, "C"))

    def test_thousand_readings_chain(self, world):
        world.ingest(1000)
        items = [it for _, it in world.tp.uploads]
        assert [it.header.seq for it in items] == list(range(1000))
        views = verify_chain(items, lambda o, s, e: derive_stream_key(MASTER, o, s, e))
        assert [v.value for v in views] == [float(i) for i in range(1000)]


class TestFlush:
    def test_healthy(self, world):
        world.ingest(5)
        assert world.tp.flush_uploads() == 5
        assert world.tp.queue_length == 0
        assert len(world.cloud.logs[("alice", "s1")].items) == 5

    def test_empty(self, world):
        assert world.tp.flush_uploads() == 0

    def test_drop_mid_flush(self):
        w = World(budget=2)
        w.ingest(5)
        assert w.tp.flush_uploads() == 2
        assert w.tp.queue_length == 3
        w.link.budget = None
        assert w.tp.flush_uploads() == 3
        assert w.link.stores == [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]

    def test_no_progress_raises(self):
        w = World(budget=0)
        w.ingest(2)
        with pytest.raises(TransportDown) as ei:
            w.tp.flush_uploads()
        assert ei.value.uploaded == 0
        assert w.tp.queue_length == 2

    def test_duplicate_resend_is_deduplicated(self, world):
        world.ingest(3)
        items = [it for _, it in world.tp.uploads]
        world.tp.flush_uploads()
        for it in items:
            assert world.cloud.store_item(Principal("trust-point:alice"), it.to_wire())["duplicate"]


class TestGrants:
    def test_request_pending(self, world):
        world.request()
        world.tp.sync()
        [g] = world.tp.pending()
        assert (g.grant_id, g.instance_id, g.streams, g.status) == ("G1", world.iid, ["s1"], GrantStatus.PENDING)
        # no key material leaves at this step
        assert world.service_inbox() == []

    def test_duplicate_coalesced(self, world):
        world.request(rid="r1")
        world.request(rid="r2")
        world.tp.sync()
        [g] = world.tp.pending()
        assert g.request_ids == ["r1", "r2"]

    def test_unknown_stream_filtered(self, world):
        world.request(streams=("s1", "nope"))
        world.tp.sync()
        [g] = world.tp.pending()
        assert (g.streams, g.unknown_streams) == (["s1"], ["nope"])

    def test_unknown_service(self, world):
        world.tp.link = LocalCloudLink(world.cloud, "trust-point:alice")
        body = {"epoch_end": 0, "epoch_start": 0, "instance_id": "svc-ghost", "kind": wire.GRANT_REQUEST,
                "request_id": "r", "streams": ["s1"]}
        with pytest.raises(UnknownService):
            world.tp.handle_grant_request(body)

    def test_spoofed_sender_rejected(self, world):
        other = world.cloud.register_service(SVC, "m", x25519.X25519PrivateKey.generate().public_key()
                                             .public_bytes_raw().hex())
        body = {"epoch_end": 0, "epoch_start": 0, "instance_id": world.iid, "kind": wire.GRANT_REQUEST,
                "request_id": "r", "streams": ["s1"]}
        world.cloud.relay(SVC, "trust-point:alice", canonical.dumps_str(body), other)
        world.tp.sync()
        assert world.tp.pending() == []
        assert world.tp.audit.since(0)[-1].action == "request-rejected"

    def test_approve_delivers_exactly_granted(self, world):
        world.ingest(4, "s1")
        world.ingest(4, "s2")
        world.request()
        world.tp.sync()
        wks = world.tp.approve_grant("G1")
        assert wks.coverage() == {("s1", 0)}
        world.tp.sync()
        msgs = world.service_inbox()
        assert [m["kind"] for m in msgs] == [wire.GRANT_DECISION, wire.WRAPPED_KEYS]
        assert msgs[0]["status"] == "Approved" and msgs[0]["request_ids"] == ["r1"]
        keys = world.service_keys(msgs)
        s1 = world.cloud.query_items(SVC, "alice", "s1", (0, 0), None, world.iid)
        views = verify_chain([ProtectedDataItem.from_bytes(r) for r in s1], lambda o, s, e: keys[(s, e)])
        assert [v.value for v in views] == [0.0, 1.0, 2.0, 3.0]
        with pytest.raises(AccessDenied):
            world.cloud.query_items(SVC, "alice", "s2", (0, 0), None, world.iid)
        s2 = world.cloud.query_items(Principal("trust-point:alice"), "alice", "s2", (0, 0))
        with pytest.raises(WrongKey):
            verify_and_unprotect(ProtectedDataItem.from_bytes(s2[0]), keys[("s1", 0)], GENESIS_TAG)
        with pytest.raises(NotPending):
            world.tp.approve_grant("G1")

    def test_deny(self, world):
        world.request()
        world.tp.sync()
        world.tp.deny_grant("G1")
        world.tp.sync()
        [m] = world.service_inbox()
        assert m["status"] == "Denied"
        with pytest.raises(AccessDenied):
            world.cloud.query_items(SVC, "alice", "s1", (0, 0), None, world.iid)
        with pytest.raises(NotPending):
            world.tp.approve_grant("G1")

    def test_unknown_grant(self, world):
        with pytest.raises(UnknownGrant):
            world.tp.approve_grant("G42")

    def test_revoke_rotates(self, world):
        world.ingest(2)
        world.request(end=None)
        world.tp.sync()
        world.tp.approve_grant("G1")
        world.tp.sync()
        keys = world.service_keys(world.service_inbox())
        assert world.tp.revoke_grant("G1") == {"s1": 1}
        world.ingest(2, start=2)
        world.tp.sync()
        [m] = world.service_inbox()
        assert m["status"] == "Revoked"
        with pytest.raises(AccessDenied):
            world.cloud.query_items(SVC, "alice", "s1", (1, 1), None, world.iid)
        stored = world.cloud.query_items(Principal("trust-point:alice"), "alice", "s1", (0, 1))
        new_items = [ProtectedDataItem.from_bytes(r) for r in stored if b'"epoch":1' in r]
        assert len(new_items) == 2
        for it in new_items:
            for k in keys.values():
                with pytest.raises(VerificationError):
                    verify_and_unprotect(it, k, GENESIS_TAG)
        # forward-only: old epoch stays readable with the key already held
        old = ProtectedDataItem.from_bytes(stored[0])
        assert verify_and_unprotect(old, keys[("s1", 0)], GENESIS_TAG).value == 0.0
        with pytest.raises(NotApproved):
            world.tp.revoke_grant("G1")

    def test_rotation_pushes_to_other_open_grant(self, world):
        other_key = x25519.X25519PrivateKey.generate()
        other = world.cloud.register_service(Principal("service:other"), "m",
                                             other_key.public_key().public_bytes_raw().hex())
        world.request(end=None)
        body = {"epoch_end": None, "epoch_start": 0, "instance_id": other, "kind": wire.GRANT_REQUEST,
                "request_id": "x", "streams": ["s1"]}
        world.cloud.relay(Principal("service:other"), "trust-point:alice", canonical.dumps_str(body), other)
        world.tp.sync()
        world.tp.approve_grant("G1")
        world.tp.approve_grant("G2")
        world.tp.revoke_grant("G1")
        assert world.tp.delivered == {world.iid: {("s1", 0)}, other: {("s1", 0), ("s1", 1)}}

    def test_missing_grantee_key(self, world):
        world.request()
        world.tp.sync()
        world.tp.grants["G1"].grantee_public_key = None
        with pytest.raises(MissingGranteeKey):
            world.tp.approve_grant("G1")
        assert world.tp.grants["G1"].status is GrantStatus.PENDING

    def test_offline_approval_queues(self, world):
        world.request()
        world.tp.sync()
        world.link.up = False
        world.tp.approve_grant("G1")
        assert world.tp.sync()["error"]
        assert world.service_inbox() == []
        world.link.up = True
        world.tp.sync()
        assert len(world.service_inbox()) == 2

    def test_transition_table(self):
        assert ALLOWED_TRANSITIONS == {("Pending", "Approved"), ("Pending", "Denied"), ("Approved", "Revoked")}


class TestPolicyAndAudit:
    def test_policy_change_applies_to_new_items(self, world):
        world.ingest(1)
        world.tp.set_policy("s1", "timestamp", "encrypted")
        world.ingest(1, start=1)
        a, b = (it for _, it in world.tp.uploads)
        assert "timestamp" in a.header.aad_fields and "timestamp" not in b.header.aad_fields
        assert world.tp.audit.since(0)[-1].action == "policy-changed"

    def test_one_audit_record_per_decision(self, world):
        world.request()
        world.tp.sync()
        n = len(world.tp.audit)
        world.tp.approve_grant("G1")
        assert len(world.tp.audit) == n + 1
        world.tp.revoke_grant("G1")
        assert len(world.tp.audit) == n + 2


class TestFlowGuard:
    def test_normal_run_has_no_plaintext(self, world):
        world.ingest(20)
        world.request()
        world.tp.sync()
        world.tp.approve_grant("G1")
        world.tp.sync()
        st = world.tp.flow.stats()
        assert st["plaintext_bearing"] == 0 and st["messages"] > 20

    def test_blocks_plaintext_store(self):
        g = FlowGuard()
        with pytest.raises(FlowViolation):
            g.check({"item": {"value": 1}, "type": wire.STORE})
        with pytest.raises(FlowViolation):
            g.check({"reading": {"value": 1}, "type": "UPLOAD"})
        assert g.stats()["plaintext_bearing"] == 2

    def test_blocks_needles(self):
        g = FlowGuard([b"SENTINEL-4711-xx"])
        for form in ["SENTINEL-4711-xx", b"SENTINEL-4711-xx".hex(), "U0VOVElORUwtNDcxMS14eA"]:
            with pytest.raises(FlowViolation):
                g.check({"address": form, "type": wire.FETCH_INBOX})
        g.check({"address": "trust-point:alice", "type": wire.FETCH_INBOX})

    def test_key_bytes_are_needles(self, world):
        k = derive_stream_key(MASTER, "alice", "s1", 0)
        with pytest.raises(FlowViolation):
            world.tp._send({"address": k.key_bytes.hex(), "type": wire.FETCH_INBOX})


class TestPersistence:
    def test_restart_continues_chain(self, tmp_path):
        w = World(tmp_path)
        w.ingest(3)
        w.tp.flush_uploads()
        w.ingest(2, start=3)
        w.request(end=None)
        w.tp.sync()
        w.tp.approve_grant("G1")
        tp2 = TrustPoint("alice", MASTER, [DeviceRegistration("dev-1", CRED, {"s1", "s2"})], None,
                         w.link, state_dir=tmp_path)
        assert tp2.queue_length == 0  # the sync above flushed everything
        assert tp2.grants["G1"].status is GrantStatus.APPROVED
        assert tp2.policies["s2"].unit_mode.value == "encrypted"
        tp2.ingest_reading(CRED, SensorReading("dev-1", "s1", 99, 5.0, "C"))
        tp2.flush_uploads()
        stored = w.cloud.query_items(Principal("trust-point:alice"), "alice", "s1", (0, 0))
        items = [ProtectedDataItem.from_bytes(r) for r in stored]
        assert [it.header.seq for it in items] == list(range(6))
        verify_chain(items, lambda o, s, e: derive_stream_key(MASTER, o, s, e))
        assert len(tp2.audit) == len(w.tp.audit)

    def test_unflushed_queue_survives(self, tmp_path):
        w = World(tmp_path, budget=0)
        w.ingest(4)
        tp2 = TrustPoint("alice", MASTER, [DeviceRegistration("dev-1", CRED, {"s1"})], None,
                         w.link, state_dir=tmp_path)
        assert [it.header.seq for _, it in tp2.uploads] == [0, 1, 2, 3]
        tp2.ingest_reading(CRED, SensorReading("dev-1", "s1", 99, 5.0, "C"))
        assert tp2.uploads[-1][1].header.seq == 4
