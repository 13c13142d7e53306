import itertools

import pytest
from hypothesis import given, strategies as st

from sensorcloud import canonical
from sensorcloud.domain import (
    CLOUD,
    HOME,
    AuditLog,
    DeviceRegistry,
    ItemState,
    LocationMode,
    ProtectionPolicy,
    SensorReading,
    TimestampMode,
    TrustDomain,
    UnitMode,
    apply_policy_view,
    merge_view,
    policy_view,
    service_domain,
    validate_flow,
)
from sensorcloud.errors import InvalidPolicy, InvalidReading, UnauthorizedDevice, UnknownStream

SVC = service_domain("svc-1")
DOMAINS = [HOME, CLOUD, SVC]


def flow_truth_table(state, source, dest):
    # written out by hand from the flow rule, one row per source domain
    allowed = {
        ("home", "home"): True,
        ("home", "cloud"): False,
        ("home", "service"): False,
        ("cloud", "home"): False,
        ("cloud", "cloud"): True,
        ("cloud", "service"): False,
        ("service", "home"): False,
        ("service", "cloud"): False,
        ("service", "service"): True,
    }
    if state is ItemState.PROTECTED:
        return True
    return allowed[(source.kind.value, dest.kind.value)]


def reading(**kw):
    base = dict(device_id="dev-1", stream_id="s1", timestamp=1699999999123, value=21.5,
                unit="C", location_tag="kitchen", seq_hint=7)
    base.update(kw)
    return SensorReading(**base)


class TestValidateFlow:
    @pytest.mark.parametrize("state,source,dest", list(itertools.product(ItemState, DOMAINS, DOMAINS)))
    def test_matches_truth_table(self, state, source, dest):
        assert validate_flow(state, source, dest) is flow_truth_table(state, source, dest)

    def test_table_size(self):
        assert len(list(itertools.product(ItemState, DOMAINS, DOMAINS))) == 18

    def test_examples(self):
        assert validate_flow(ItemState.PLAINTEXT, HOME, HOME)
        assert not validate_flow(ItemState.PLAINTEXT, HOME, CLOUD)
        assert validate_flow(ItemState.PROTECTED, HOME, CLOUD)
        assert not validate_flow(ItemState.PLAINTEXT, CLOUD, SVC)

    def test_distinct_service_instances_are_distinct_domains(self):
        assert not validate_flow(ItemState.PLAINTEXT, SVC, service_domain("svc-2"))
        assert validate_flow(ItemState.PLAINTEXT, SVC, service_domain("svc-1"))

    def test_service_label_needs_id(self):
        with pytest.raises(ValueError):
            service_domain("")
        with pytest.raises(ValueError):
            TrustDomain(HOME.kind, "x")


class TestSensorReading:
    def test_negative_timestamp(self):
        with pytest.raises(InvalidReading):
            reading(timestamp=-1)

    def test_value_size_limit(self):
        reading(value=b"x" * 100)
        with pytest.raises(InvalidReading):
            reading(value=b"x" * 200)  # hex doubles the size

    def test_rejects_nan_and_bool(self):
        with pytest.raises(InvalidReading):
            reading(value=float("nan"))
        with pytest.raises(InvalidReading):
            reading(value=True)

    def test_canonical_form(self):
        r = reading(value=b"\x01\xab", location_tag=None, seq_hint=None)
        assert r.canonical_bytes() == (
            b'{"device_id":"dev-1","stream_id":"s1","timestamp":1699999999123,'
            b'"unit":"C","value":{"hex":"01ab"}}'
        )
        assert SensorReading.from_dict(canonical.loads(r.canonical_bytes())) == r


class TestPolicyView:
    def test_coarsened_floor(self):
        # floor to the UTC hour boundary, computed via datetime in the oracle script
        view = apply_policy_view(reading(), ProtectionPolicy(TimestampMode.COARSENED, 3600000))
        assert view.aad_fields["timestamp"] == 1699999200000
        assert view.aad_fields["timestamp_granularity_ms"] == 3600000

    def test_minimal_protection(self):
        view = apply_policy_view(reading(), ProtectionPolicy())
        assert view.aad_fields == {"timestamp": 1699999999123, "unit": "C", "location_tag": "kitchen"}
        assert set(view.secret_fields) == {"value", "device_id", "seq_hint"}

    def test_maximal_protection(self):
        policy = ProtectionPolicy(TimestampMode.ENCRYPTED, None, LocationMode.ENCRYPTED, UnitMode.ENCRYPTED)
        view = apply_policy_view(reading(), policy)
        assert view.aad_fields == {}
        assert set(view.secret_fields) == {"value", "device_id", "seq_hint", "timestamp", "location_tag", "unit"}

    def test_dropped_location(self):
        view = policy_view(reading(), ProtectionPolicy(location_mode=LocationMode.DROPPED))
        assert view.location_tag is None

    def test_policy_errors(self):
        with pytest.raises(InvalidPolicy):
            ProtectionPolicy(TimestampMode.COARSENED, 0)
        with pytest.raises(InvalidPolicy):
            ProtectionPolicy.from_dict({"encrypt_value": False})
        with pytest.raises(InvalidPolicy):
            ProtectionPolicy().with_field("value", "plain")
        assert ProtectionPolicy().with_field("timestamp", "coarsened:60000").granularity_ms == 60000


readings = st.builds(
    SensorReading,
    device_id=st.text(min_size=1, max_size=12),
    stream_id=st.text(min_size=1, max_size=12),
    timestamp=st.integers(0, 2**53),
    value=st.one_of(st.integers(-2**40, 2**40), st.floats(allow_nan=False, allow_infinity=False),
                    st.binary(max_size=64)),
    unit=st.text(max_size=8),
    location_tag=st.none() | st.text(max_size=16),
    seq_hint=st.none() | st.integers(0, 2**31),
)


@given(readings, st.one_of(
    st.builds(ProtectionPolicy, timestamp_mode=st.sampled_from([TimestampMode.PLAIN, TimestampMode.ENCRYPTED]),
              location_mode=st.sampled_from(list(LocationMode)), unit_mode=st.sampled_from(list(UnitMode))),
    st.builds(lambda g, lm, um: ProtectionPolicy(TimestampMode.COARSENED, g, lm, um),
              st.integers(1, 10**8), st.sampled_from(list(LocationMode)), st.sampled_from(list(UnitMode))),
))
def test_value_never_in_aad(r, policy):
    view = apply_policy_view(r, policy)
    assert "value" not in view.aad_fields
    assert "value" in view.secret_fields
    assert not set(view.aad_fields) & set(view.secret_fields)


@given(readings, st.sampled_from([TimestampMode.PLAIN, TimestampMode.ENCRYPTED]),
       st.sampled_from([LocationMode.PLAIN, LocationMode.ENCRYPTED]), st.sampled_from(list(UnitMode)))
def test_lossless_roundtrip(r, ts_mode, loc_mode, unit_mode):
    view = apply_policy_view(r, ProtectionPolicy(ts_mode, None, loc_mode, unit_mode))
    merged = merge_view(r.stream_id, view.aad_fields, view.secret_fields)
    assert merged.to_reading() == r


class TestDevices:
    def test_authorize(self):
        reg = DeviceRegistry()
        dev = reg.register("d1", ["s1"])
        reg.authorize(dev.credential, "d1", "s1")
        with pytest.raises(UnauthorizedDevice):
            reg.authorize(b"\x00" * 32, "d1", "s1")
        with pytest.raises(UnauthorizedDevice):
            reg.authorize(dev.credential, "d2", "s1")
        with pytest.raises(UnknownStream):
            reg.authorize(dev.credential, "d1", "s2")

    def test_credentials_unique(self):
        reg = DeviceRegistry()
        dev = reg.register("d1", ["s1"])
        with pytest.raises(ValueError):
            reg.add(type(dev)("d2", dev.credential, {"s2"}))


def test_audit_log_append_only(tmp_path):
    path = tmp_path / "audit.ndjson"
    log = AuditLog(path)
    log.append(1, "owner", "approve", "G1")
    log.append(2, "owner", "deny", "G2")
    assert [r.audit_seq for r in log.since()] == [0, 1]
    reloaded = AuditLog(path)
    assert reloaded.since(1)[0].subject == "G2"
    assert reloaded.append(3, "owner", "revoke", "G1").audit_seq == 2
