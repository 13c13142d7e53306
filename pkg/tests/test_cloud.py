import itertools

import pytest
from cryptography.hazmat.primitives.asymmetric import x25519
from hypothesis import given, settings, strategies as st

from sensorcloud import canonical, wire
from sensorcloud.cloud import CloudPlatform, GrantRegistryEntry, Principal, _covered
from sensorcloud.cloud_server import build
from sensorcloud.domain import ProtectionPolicy, SensorReading
from sensorcloud.errors import (
    AccessDenied,
    BadRequest,
    DisabledInProduction,
    MalformedItem,
    MalformedKey,
    NotRegistered,
    NotTrustPointSession,
    UnknownAddressee,
    UnknownService,
    UnknownStream,
)
from sensorcloud.objsec import GENESIS_TAG, KeyStore, protect
from sensorcloud.transport import Identity, connect, parse_endpoint

TP = Principal("trust-point:alice")
TP_OTHER = Principal("trust-point:bob")
SVC = Principal("service:acme")
SVC_OTHER = Principal("service:evil")
OPERATOR = Principal("cloud:operator")


def pubhex():
    return x25519.X25519PrivateKey.generate().public_key().public_bytes_raw().hex()


def make_items(owner="alice", stream="s1", epoch=0, n=3, value=1.0):
    ks = KeyStore(owner, bytes(32), {stream: epoch})
    key = ks.key(stream)
    out, prev = [], GENESIS_TAG
    for i in range(n):
        r = SensorReading("d1", stream, 1_700_000_000_000 + i, value + i, "C")
        item = protect(r, ProtectionPolicy(), key, prev, i)
        prev = item.auth_tag
        out.append(item)
    return out


@pytest.fixture
def cloud(tmp_path):
    return CloudPlatform(tmp_path, test_mode=True, known_owners={"alice", "bob"})


class TestStore:
    def test_fresh_and_duplicate(self, cloud):
        item = make_items(n=1)[0]
        a1 = cloud.store_item(TP, item.to_wire())
        a2 = cloud.store_item(TP, item.to_wire())
        assert (a1["duplicate"], a2["duplicate"]) == (False, True)
        assert len(cloud.logs[("alice", "s1")].items) == 1

    def test_service_cannot_store(self, cloud):
        with pytest.raises(NotTrustPointSession):
            cloud.store_item(SVC, make_items(n=1)[0].to_wire())

    def test_other_owner_cannot_store(self, cloud):
        with pytest.raises(NotTrustPointSession):
            cloud.store_item(TP_OTHER, make_items(n=1)[0].to_wire())

    def test_malformed(self, cloud):
        w = make_items(n=1)[0].to_wire()
        w["auth_tag"] = "zz"
        with pytest.raises(MalformedItem):
            cloud.store_item(TP, w)
        w = make_items(n=1)[0].to_wire()
        w["header"]["key_id"] = "0" * 64
        with pytest.raises(MalformedItem):
            cloud.store_item(TP, w)

    def test_reload_rebuilds_index(self, tmp_path):
        c1 = CloudPlatform(tmp_path)
        items = make_items(n=4)
        for it in reversed(items):
            c1.store_item(TP, it.to_wire())
        c2 = CloudPlatform(tmp_path)
        got = c2.query_items(TP, "alice", "s1", (0, 0))
        assert got == [it.to_bytes() for it in items]


class TestQueryAuthorization:
    def setup_grant(self, cloud, start, end):
        iid = cloud.register_service(SVC, "m", pubhex())
        cloud.upsert_grant(TP, GrantRegistryEntry("G1", iid, "alice", ["s1"], start, end))
        return iid

    def test_granted_range(self, cloud):
        for e in (0, 1, 2):
            for it in make_items(epoch=e, n=2):
                cloud.store_item(TP, it.to_wire())
        iid = self.setup_grant(cloud, 1, 2)
        got = cloud.query_items(SVC, "alice", "s1", (1, 2), None, iid)
        coords = [canonical.loads(r)["header"] for r in got]
        assert [(h["epoch"], h["seq"]) for h in coords] == [(1, 0), (1, 1), (2, 0), (2, 1)]
        with pytest.raises(AccessDenied):
            cloud.query_items(SVC, "alice", "s1", (0, 1), None, iid)

    def test_revoked(self, cloud):
        cloud.store_item(TP, make_items(n=1)[0].to_wire())
        iid = self.setup_grant(cloud, 0, None)
        cloud.remove_grant(TP, "G1")
        for rng in [(0, 0), (5, 9)]:
            with pytest.raises(AccessDenied):
                cloud.query_items(SVC, "alice", "s1", rng, None, iid)

    def test_unknown_stream_after_authorization(self, cloud):
        with pytest.raises(UnknownStream):
            cloud.query_items(TP, "alice", "nope", (0, 0))

    def test_truth_table(self, cloud):
        """Exhaustive (role, grant state, range) matrix against a set-membership oracle."""
        cloud.store_item(TP, make_items(n=1)[0].to_wire())
        iid = cloud.register_service(SVC, "m", pubhex())
        other_iid = cloud.register_service(SVC_OTHER, "m", pubhex())
        grants = {
            "none": [],
            "closed": [(0, 1)],
            "open": [(2, None)],
            "split": [(0, 0), (2, 3)],
            "adjacent": [(0, 1), (2, 3)],
        }
        ranges = [(lo, hi) for lo in range(5) for hi in range(lo, 5)] + [(3, 2)]
        roles = ["tp-own", "tp-other", "svc", "svc-foreign-instance", "operator"]
        for gname, spans in grants.items():
            cloud.grants.clear()
            for k, (s, e) in enumerate(spans):
                cloud.upsert_grant(TP, GrantRegistryEntry(f"G{k}", iid, "alice", ["s1"], s, e))
            allowed_epochs = {ep for s, e in spans for ep in range(s, (e if e is not None else 99) + 1)}
            for role, (lo, hi) in itertools.product(roles, ranges):
                principal, inst = {
                    "tp-own": (TP, None),
                    "tp-other": (TP_OTHER, None),
                    "svc": (SVC, iid),
                    "svc-foreign-instance": (SVC_OTHER, iid),
                    "operator": (OPERATOR, None),
                }[role]
                if lo > hi:
                    expect = False
                elif role == "tp-own":
                    expect = True
                elif role == "svc":
                    expect = set(range(lo, hi + 1)) <= allowed_epochs
                else:
                    expect = False
                try:
                    cloud.query_items(principal, "alice", "s1", (lo, hi), None, inst)
                    got = True
                except AccessDenied:
                    got = False
                assert got == expect, (gname, role, lo, hi)
        assert other_iid != iid

    @given(st.lists(st.tuples(st.integers(0, 20), st.one_of(st.none(), st.integers(0, 20))), max_size=5),
           st.integers(0, 25), st.integers(0, 25))
    def test_covered_matches_enumeration(self, spans, lo, hi):
        spans = [(s, e) for s, e in spans if e is None or e >= s]
        members = {x for s, e in spans for x in range(s, (e if e is not None else 30) + 1)}
        if hi >= lo:
            assert _covered(spans, lo, hi) == (set(range(lo, hi + 1)) <= members)


class TestRoleMatrix:
    """Every (role, operation) pair against a hand-written expectation."""

    def test_matrix(self, cloud):
        item = make_items(n=1)[0]
        cloud.store_item(TP, item.to_wire())
        iid = cloud.register_service(SVC, "m", pubhex())
        entry = GrantRegistryEntry("G1", iid, "alice", ["s1"], 0, 0)
        ops = {
            "store": lambda p: cloud.store_item(p, item.to_wire()),
            "register": lambda p: cloud.register_service(p, "m", pubhex()),
            "lookup": lambda p: cloud.lookup_service(p, iid),
            "upsert": lambda p: cloud.upsert_grant(p, entry),
            "remove": lambda p: cloud.remove_grant(p, "G1"),
            "relay-to-instance": lambda p: cloud.relay(p, f"instance:{iid}", "x", iid),
            "relay-to-tp": lambda p: cloud.relay(p, "trust-point:alice", "x", iid),
            "inbox-tp": lambda p: cloud.fetch_inbox(p, "trust-point:alice"),
            "inbox-instance": lambda p: cloud.fetch_inbox(p, f"instance:{iid}"),
            "dump": lambda p: cloud.handle(p, {"type": wire.DUMP_STATE}),
        }
        ok = "ok"
        expected = {
            "tp": {"store": ok, "register": AccessDenied, "lookup": ok, "upsert": ok, "remove": ok,
                   "relay-to-instance": ok, "relay-to-tp": AccessDenied, "inbox-tp": ok,
                   "inbox-instance": AccessDenied, "dump": "ERROR"},
            "tp-other": {"store": NotTrustPointSession, "register": AccessDenied, "lookup": ok,
                         "upsert": NotTrustPointSession, "remove": NotTrustPointSession, "relay-to-instance": ok,
                         "relay-to-tp": AccessDenied, "inbox-tp": AccessDenied,
                         "inbox-instance": AccessDenied, "dump": "ERROR"},
            "svc": {"store": NotTrustPointSession, "register": ok, "lookup": AccessDenied,
                    "upsert": NotTrustPointSession, "remove": NotTrustPointSession,
                    "relay-to-instance": AccessDenied, "relay-to-tp": ok, "inbox-tp": AccessDenied,
                    "inbox-instance": ok, "dump": "ERROR"},
            "svc-other": {"store": NotTrustPointSession, "register": ok, "lookup": AccessDenied,
                          "upsert": NotTrustPointSession, "remove": NotTrustPointSession,
                          "relay-to-instance": NotRegistered, "relay-to-tp": NotRegistered,
                          "inbox-tp": AccessDenied, "inbox-instance": NotRegistered, "dump": "ERROR"},
            "operator": {"store": NotTrustPointSession, "register": AccessDenied, "lookup": AccessDenied,
                         "upsert": NotTrustPointSession, "remove": NotTrustPointSession,
                         "relay-to-instance": AccessDenied, "relay-to-tp": AccessDenied,
                         "inbox-tp": AccessDenied, "inbox-instance": AccessDenied, "dump": "STATE"},
        }
        principals = {"tp": TP, "tp-other": TP_OTHER, "svc": SVC, "svc-other": SVC_OTHER, "operator": OPERATOR}
        for role, row in expected.items():
            for op, want in row.items():
                cloud.upsert_grant(TP, entry)
                if isinstance(want, type):
                    with pytest.raises(want):
                        ops[op](principals[role])
                elif want in ("ERROR", "STATE"):
                    assert ops[op](principals[role])["type"] == want, (role, op)
                else:
                    ops[op](principals[role])


class TestRegistryAndRelay:
    def test_register_twice_distinct(self, cloud):
        k = pubhex()
        assert cloud.register_service(SVC, "m", k) != cloud.register_service(SVC, "m", k)

    @pytest.mark.parametrize("key", ["", "00" * 32, "ab" * 31, "XY" * 32, 7])
    def test_malformed_key(self, cloud, key):
        with pytest.raises(MalformedKey):
            cloud.register_service(SVC, "m", key)

    def test_relay_verbatim_and_drained(self, cloud):
        iid = cloud.register_service(SVC, "m", pubhex())
        body = '{"weird":  "spacing kept"}'
        cloud.relay(TP, f"instance:{iid}", body)
        msgs = cloud.fetch_inbox(SVC, f"instance:{iid}")
        assert msgs == [{"body": body, "from": "trust-point:alice", "to": f"instance:{iid}"}]
        assert cloud.fetch_inbox(SVC, f"instance:{iid}") == []

    def test_relay_unknown(self, cloud):
        with pytest.raises(UnknownAddressee):
            cloud.relay(TP, "instance:svc-nope", "x")
        iid = cloud.register_service(SVC, "m", pubhex())
        with pytest.raises(UnknownAddressee):
            cloud.relay(SVC, "trust-point:carol", "x", iid)

    def test_lookup_unknown(self, cloud):
        with pytest.raises(UnknownService):
            cloud.lookup_service(TP, "svc-nope")

    def test_grant_for_unknown_instance(self, cloud):
        with pytest.raises(UnknownService):
            cloud.upsert_grant(TP, GrantRegistryEntry("G1", "svc-x", "alice", ["s1"], 0, 0))

    def test_bad_grant_range(self):
        with pytest.raises(BadRequest):
            GrantRegistryEntry.from_dict({"grant_id": "G", "instance_id": "i", "owner_id": "o",
                                          "streams": ["s"], "epoch_start": 3, "epoch_end": 1})


class TestDumpState:
    def test_disabled_in_production(self, tmp_path):
        with pytest.raises(DisabledInProduction):
            CloudPlatform(tmp_path).dump_state()

    def test_empty(self):
        snap = CloudPlatform(None, test_mode=True).dump_state()
        assert all(not v for v in snap.values())

    def test_no_plaintext_sentinel(self, cloud):
        ks = KeyStore("alice", bytes(32), {"s1": 0})
        r = SensorReading("d1", "s1", 1, b"SENTINEL-4711", "C", "SENTINEL-4711")
        policy = ProtectionPolicy(location_mode="encrypted")
        cloud.store_item(TP, protect(r, policy, ks.key("s1"), GENESIS_TAG, 0).to_wire())
        blob = canonical.dumps(cloud.dump_state())
        assert b"SENTINEL-4711" not in blob
        assert b"SENTINEL-4711".hex().encode() not in blob
        assert ks.key("s1").key_bytes.hex().encode() not in blob


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 4), st.floats(-5, 5)), min_size=1, max_size=25))
def test_log_immutability(ops):
    """First stored bytes for (epoch, seq) survive any later store or restart."""
    cloud = CloudPlatform(None)
    first: dict[tuple[int, int], bytes] = {}
    keys = {e: KeyStore("alice", bytes(32), {"s1": e}).key("s1") for e in range(3)}
    for epoch, seq, v in ops:
        r = SensorReading("d1", "s1", 5, v, "C")
        item = protect(r, ProtectionPolicy(), keys[epoch], bytes([seq]) * 16, seq) if seq else \
            protect(r, ProtectionPolicy(), keys[epoch], GENESIS_TAG, 0)
        cloud.store_item(TP, item.to_wire())
        first.setdefault((epoch, seq), item.to_bytes())
        log = cloud.logs[("alice", "s1")]
        assert all(log.items[k] == b for k, b in first.items())
    assert list(cloud.logs[("alice", "s1")].ordered()) == sorted(first)


def test_server_roundtrip(tmp_path):
    cloud_id = Identity.generate("cloud")
    tp_id = Identity.generate("trust-point:alice")
    tp_id.pin("cloud", cloud_id.public_bytes)
    cloud_id.pin(tp_id.role, tp_id.public_bytes)
    server = build({"identity": cloud_id.to_dict(), "listen": "127.0.0.1:0"}, data_dir=str(tmp_path))
    server.serve_in_background()
    try:
        s = connect(tp_id, *parse_endpoint(server.endpoint))
        item = make_items(n=1)[0]
        ack = wire.call(s, {"item": item.to_wire(), "type": wire.STORE}, wire.STORE_ACK)
        assert ack["duplicate"] is False
        res = wire.call(s, {"epochs": [0, 0], "owner_id": "alice", "stream_id": "s1", "type": wire.QUERY})
        assert res["items"] == [item.to_wire()]
        with pytest.raises(AccessDenied):
            wire.call(s, {"type": wire.DUMP_STATE})
        s.close()
        op = Identity.generate("cloud:operator")
        op.pin("cloud", cloud_id.public_bytes)
        server.identity.pin(op.role, op.public_bytes)
        s_op = connect(op, *parse_endpoint(server.endpoint))
        with pytest.raises(DisabledInProduction):
            wire.call(s_op, {"type": wire.DUMP_STATE})
        s_op.close()
        # an unpinned peer is rejected at the handshake
        stranger = Identity.generate("trust-point:mallory")
        stranger.pin("cloud", cloud_id.public_bytes)
        with pytest.raises(Exception):
            s2 = connect(stranger, *parse_endpoint(server.endpoint), timeout=5)
            wire.call(s2, {"type": wire.DUMP_STATE})
    finally:
        server.shutdown()
        server.server_close()
