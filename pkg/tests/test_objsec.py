import json
import random
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric import x25519
from hypothesis import given, settings, strategies as st

from sensorcloud.domain import LocationMode, ProtectionPolicy, SensorReading, TimestampMode, UnitMode, policy_view
from sensorcloud.errors import (
    ChainBreak,
    MalformedKey,
    SequenceViolation,
    UnknownStream,
    UnwrapError,
    VerificationError,
    WrongKey,
)
from sensorcloud.objsec import (
    GENESIS_TAG,
    ChainCursor,
    KeyStore,
    ProtectedDataItem,
    SequenceGuard,
    derive_stream_key,
    protect,
    rotate_epoch,
    set_nonce_observer,
    unwrap_keys,
    verify_and_unprotect,
    verify_chain,
    wrap_keys,
)

GOLDEN = Path(__file__).parent / "golden" / "envelope_v1.json"
MASTER = bytes(range(32))


def small_reading(i=0, value=21.5, stream="s1"):
    return SensorReading("d1", stream, 1700000000000 + i * 1000, value, "C", None, None)


def produce_chain(n, key, policy=ProtectionPolicy()):
    items, prev = [], GENESIS_TAG
    guard = SequenceGuard()
    for i in range(n):
        item = protect(small_reading(i, float(i), key.stream_id), policy, key, prev, i, guard=guard)
        items.append(item)
        prev = item.auth_tag
    return items


class TestKeys:
    def test_deterministic(self):
        assert derive_stream_key(MASTER, "o", "s1", 0) == derive_stream_key(MASTER, "o", "s1", 0)

    def test_epoch_separation(self):
        assert derive_stream_key(MASTER, "o", "s1", 0).key_bytes != derive_stream_key(MASTER, "o", "s1", 1).key_bytes

    def test_owner_separation(self):
        a = derive_stream_key(MASTER, "alice", "s1", 0)
        b = derive_stream_key(MASTER, "bob", "s1", 0)
        assert a.key_bytes != b.key_bytes and a.key_id != b.key_id

    def test_no_collisions_over_10k_pairs(self):
        rng = random.Random(11)
        pairs = set()
        while len(pairs) < 10_000:
            pairs.add((f"stream-{rng.randrange(10**6)}", rng.randrange(1000)))
        ids, keys = set(), set()
        for stream, epoch in pairs:
            k = derive_stream_key(MASTER, "owner", stream, epoch)
            ids.add(k.key_id)
            keys.add(k.key_bytes)
        assert len(ids) == len(pairs) and len(keys) == len(pairs)

    def test_rotate(self):
        ks = KeyStore("o", MASTER)
        ks.add_stream("s1")
        assert rotate_epoch(ks, "s1") == 1
        assert rotate_epoch(ks, "s1") == 2
        keys = {ks.key("s1", e).key_bytes for e in range(3)}
        assert len(keys) == 3
        with pytest.raises(UnknownStream):
            rotate_epoch(ks, "nope")

    def test_protect_after_rotation_uses_new_epoch(self):
        ks = KeyStore("o", MASTER)
        ks.add_stream("s1")
        rotate_epoch(ks, "s1")
        item = protect(small_reading(), ProtectionPolicy(), ks.key("s1"), GENESIS_TAG, 0)
        assert (item.header.epoch, item.header.seq) == (1, 0)

    def test_key_bytes_not_in_repr(self):
        k = derive_stream_key(MASTER, "o", "s1", 0)
        assert k.key_bytes.hex() not in repr(k)


class TestProtect:
    key = derive_stream_key(MASTER, "o", "s1", 0)

    def test_roundtrip(self):
        r = SensorReading("d1", "s1", 5, b"hello", "raw", "hall", 3)
        item = protect(r, ProtectionPolicy(), self.key, GENESIS_TAG, 0)
        assert verify_and_unprotect(item, self.key, GENESIS_TAG).to_reading() == r

    def test_seq_reuse_refused(self):
        guard = SequenceGuard()
        protect(small_reading(), ProtectionPolicy(), self.key, GENESIS_TAG, 0, guard=guard)
        with pytest.raises(SequenceViolation):
            protect(small_reading(1), ProtectionPolicy(), self.key, GENESIS_TAG, 0, guard=guard)

    def test_seq_gap_refused(self):
        guard = SequenceGuard()
        first = protect(small_reading(), ProtectionPolicy(), self.key, GENESIS_TAG, 0, guard=guard)
        with pytest.raises(SequenceViolation):
            protect(small_reading(1), ProtectionPolicy(), self.key, first.auth_tag, 2, guard=guard)

    def test_genesis_rule_without_guard(self):
        with pytest.raises(SequenceViolation):
            protect(small_reading(), ProtectionPolicy(), self.key, b"\x01" * 16, 0)
        with pytest.raises(SequenceViolation):
            protect(small_reading(), ProtectionPolicy(), self.key, GENESIS_TAG, 3)

    def test_wrong_stream_key(self):
        with pytest.raises(WrongKey):
            protect(small_reading(), ProtectionPolicy(), derive_stream_key(MASTER, "o", "s2", 0), GENESIS_TAG, 0)

    def test_wrong_prev_tag_is_chain_break(self):
        items = produce_chain(2, self.key)
        with pytest.raises(ChainBreak):
            verify_and_unprotect(items[1], self.key, GENESIS_TAG)

    def test_other_epoch_key_is_wrong_key(self):
        k1 = derive_stream_key(MASTER, "o", "s1", 1)
        item = protect(small_reading(), ProtectionPolicy(), k1, GENESIS_TAG, 0)
        with pytest.raises(WrongKey):
            verify_and_unprotect(item, self.key, GENESIS_TAG)

    def test_wire_roundtrip_strict(self):
        item = produce_chain(1, self.key)[0]
        data = item.to_bytes()
        assert ProtectedDataItem.from_bytes(data) == item
        with pytest.raises(VerificationError):
            ProtectedDataItem.from_bytes(data.replace(b'"seq":0', b'"seq": 0'))


def _flip(data: bytes, bit: int) -> bytes:
    b = bytearray(data)
    b[bit // 8] ^= 1 << (bit % 8)
    return bytes(b)


def test_exhaustive_single_bit_flips():
    """Oracle: flip every bit of the wire encoding and of each binary field."""
    key = derive_stream_key(MASTER, "o", "s1", 0)
    item = protect(SensorReading("d", "s1", 1, 7, "C"), ProtectionPolicy(), key, GENESIS_TAG, 0)
    assert len(item.ciphertext) <= 64
    wire = item.to_bytes()
    failures = 0
    for bit in range(len(wire) * 8):
        try:
            verify_and_unprotect(ProtectedDataItem.from_bytes(_flip(wire, bit)), key, GENESIS_TAG)
        except VerificationError:
            continue
        failures += 1
    for name in ("ciphertext", "auth_tag", "chain_digest"):
        raw = getattr(item, name)
        for bit in range(len(raw) * 8):
            mutated = ProtectedDataItem(**{**item.__dict__, name: _flip(raw, bit)})
            with pytest.raises(VerificationError):
                verify_and_unprotect(mutated, key, GENESIS_TAG)
    assert failures == 0


class TestChain:
    key = derive_stream_key(MASTER, "o", "s1", 0)

    def keys(self, owner, stream, epoch):
        return derive_stream_key(MASTER, owner, stream, epoch)

    def test_in_order_verifies(self):
        assert len(verify_chain(produce_chain(10, self.key), self.keys)) == 10

    @pytest.mark.parametrize("victim", [0, 3, 8])
    def test_deletion(self, victim):
        items = produce_chain(10, self.key)
        del items[victim]
        with pytest.raises(ChainBreak) as ei:
            verify_chain(items, self.keys)
        assert ei.value.position == victim

    def test_tail_deletion_needs_cursor(self):
        items = produce_chain(10, self.key)
        cursor = {("o", "s1", 0): ChainCursor(9, items[9].auth_tag)}
        with pytest.raises(ChainBreak) as ei:
            verify_chain(items[:9], self.keys, cursor)
        assert ei.value.position == 9

    @pytest.mark.parametrize("i", [0, 4, 8])
    def test_swap(self, i):
        items = produce_chain(10, self.key)
        items[i], items[i + 1] = items[i + 1], items[i]
        with pytest.raises(ChainBreak) as ei:
            verify_chain(items, self.keys)
        assert ei.value.position == i

    def test_epochs_chain_independently(self):
        k1 = derive_stream_key(MASTER, "o", "s1", 1)
        items = produce_chain(3, self.key) + produce_chain(2, k1)
        assert len(verify_chain(items, self.keys)) == 5


class TestWrap:
    def setup_method(self):
        self.priv = x25519.X25519PrivateKey.generate()
        self.keys = [derive_stream_key(MASTER, "o", "s1", e) for e in range(3)]

    def wrap(self, keys, pub=None):
        return wrap_keys(keys, pub or self.priv.public_key(), grant_id="G1", grantee_instance_id="i1", owner_id="o")

    def test_roundtrip(self):
        assert unwrap_keys(self.wrap(self.keys), self.priv) == self.keys

    def test_other_private_key_fails(self):
        with pytest.raises(UnwrapError):
            unwrap_keys(self.wrap(self.keys), x25519.X25519PrivateKey.generate())

    def test_rebinding_fails(self):
        wks = self.wrap(self.keys[:1])
        forged = type(wks)("G2", wks.grantee_instance_id, wks.owner_id, wks.entries)
        with pytest.raises(UnwrapError):
            unwrap_keys(forged, self.priv)

    def test_empty(self):
        wks = self.wrap([])
        assert wks.entries == () and unwrap_keys(wks, self.priv) == []

    @pytest.mark.parametrize("bad", ["zz" * 32, "00" * 32, "ab" * 31, b"\x01" * 5])
    def test_malformed_key(self, bad):
        with pytest.raises(MalformedKey):
            self.wrap(self.keys, bad)

    def test_serialization(self):
        wks = self.wrap(self.keys)
        assert type(wks).from_dict(json.loads(json.dumps(wks.to_dict()))) == wks


# --- property tests -----------------------------------------------------------

readings = st.builds(
    lambda dev, ts, val, unit, loc, hint: SensorReading(dev, "s1", ts, val, unit, loc, hint),
    st.text(min_size=1, max_size=10), st.integers(0, 2**50),
    st.one_of(st.integers(-10**9, 10**9), st.floats(allow_nan=False, allow_infinity=False), st.binary(max_size=48)),
    st.text(max_size=6), st.none() | st.text(max_size=12), st.none() | st.integers(0, 10**6),
)
policies = st.builds(
    lambda ts, g, lm, um: ProtectionPolicy(ts, g if ts is TimestampMode.COARSENED else None, lm, um),
    st.sampled_from(list(TimestampMode)), st.integers(1, 10**7),
    st.sampled_from(list(LocationMode)), st.sampled_from(list(UnitMode)),
)


@settings(max_examples=300, deadline=None)
@given(readings, policies, st.binary(min_size=32, max_size=32), st.integers(0, 50))
def test_protect_verify_is_policy_view(r, policy, master, epoch):
    key = derive_stream_key(master, "owner", "s1", epoch)
    item = protect(r, policy, key, GENESIS_TAG, 0)
    assert verify_and_unprotect(item, key, GENESIS_TAG) == policy_view(r, policy)


def test_nonce_uniqueness_recorder():
    seen = []
    set_nonce_observer(lambda kid, nonce: seen.append((kid, nonce)))
    try:
        ks = KeyStore("o", MASTER)
        for s in ("s1", "s2"):
            ks.add_stream(s)
            for _ in range(3):
                produce_chain(10, ks.key(s))
                rotate_epoch(ks, s)
    finally:
        set_nonce_observer(None)
    assert len(seen) == len(set(seen)) == 60


# --- golden envelope vector -----------------------------------------------------


def build_golden() -> dict:
    key = derive_stream_key(MASTER, "owner-1", "s1", 0)
    reading = SensorReading("thermo-1", "s1", 1700000000000, 21.5, "C", "living-room", 0)
    policy = ProtectionPolicy(TimestampMode.COARSENED, 60000, LocationMode.ENCRYPTED, UnitMode.PLAIN)
    first = protect(reading, policy, key, GENESIS_TAG, 0)
    second = protect(SensorReading("thermo-1", "s1", 1700000060000, 21.75, "C", "living-room", 1),
                     policy, key, first.auth_tag, 1)
    return {
        "master_secret": MASTER.hex(),
        "owner_id": "owner-1",
        "policy": policy.to_dict(),
        "readings": [reading.to_dict()],
        "stream_key": {"key_id": key.key_id, "key_bytes": key.key_bytes.hex()},
        "items": [first.to_bytes().decode(), second.to_bytes().decode()],
    }


def test_golden_envelope():
    frozen = json.loads(GOLDEN.read_text())
    assert build_golden() == frozen


if __name__ == "__main__":
    GOLDEN.write_text(json.dumps(build_golden(), indent=2, sort_keys=True) + "\n")
