"""Shared vocabulary: readings, trust domains, protection policies, devices, audit."""

from __future__ import annotations

import enum
import hmac
import json
import math
import secrets
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Union

from sensorcloud import canonical
from sensorcloud.errors import InvalidPolicy, InvalidReading, UnauthorizedDevice, UnknownStream

Value = Union[int, float, bytes]

MAX_VALUE_BYTES = 256


def encode_value(value: Value) -> Any:
    if isinstance(value, bool):
        raise InvalidReading("boolean values are not scalars here; use 0/1")
    if isinstance(value, (bytes, bytearray)):
        return {"hex": bytes(value).hex()}
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvalidReading("value must be finite")
        return value
    raise InvalidReading(f"unsupported value type {type(value).__name__}")


def decode_value(obj: Any) -> Value:
    if isinstance(obj, dict):
        if set(obj) != {"hex"}:
            raise InvalidReading("malformed byte value")
        return canonical.unhex(obj["hex"])
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise InvalidReading("malformed scalar value")
    return obj


@dataclass(frozen=True)
class SensorReading:
    device_id: str
    stream_id: str
    timestamp: int
    value: Value
    unit: str
    location_tag: str | None = None
    seq_hint: int | None = None

    def __post_init__(self) -> None:
        if not self.device_id or not self.stream_id:
            raise InvalidReading("device_id and stream_id must be non-empty")
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int):
            raise InvalidReading("timestamp must be an integer")
        if self.timestamp < 0:
            raise InvalidReading("timestamp must be >= 0")
        if len(canonical.dumps(encode_value(self.value))) > MAX_VALUE_BYTES:
            raise InvalidReading(f"serialized value exceeds {MAX_VALUE_BYTES} bytes")
        if self.seq_hint is not None and (isinstance(self.seq_hint, bool) or self.seq_hint < 0):
            raise InvalidReading("seq_hint must be a non-negative integer")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "device_id": self.device_id,
            "stream_id": self.stream_id,
            "timestamp": self.timestamp,
            "unit": self.unit,
            "value": encode_value(self.value),
        }
        if self.location_tag is not None:
            out["location_tag"] = self.location_tag
        if self.seq_hint is not None:
            out["seq_hint"] = self.seq_hint
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SensorReading":
        try:
            return cls(
                device_id=d["device_id"],
                stream_id=d["stream_id"],
                timestamp=d["timestamp"],
                value=decode_value(d["value"]),
                unit=d["unit"],
                location_tag=d.get("location_tag"),
                seq_hint=d.get("seq_hint"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidReading(f"malformed reading: {exc}") from exc

    def canonical_bytes(self) -> bytes:
        return canonical.dumps(self.to_dict())


# --- trust domains -----------------------------------------------------------


class DomainKind(str, enum.Enum):
    HOME = "home"
    CLOUD = "cloud"
    SERVICE = "service"


@dataclass(frozen=True)
class TrustDomain:
    kind: DomainKind
    instance_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind is DomainKind.SERVICE and not self.instance_id:
            raise ValueError("ServiceInstance label needs a non-empty instance_id")
        if self.kind is not DomainKind.SERVICE and self.instance_id is not None:
            raise ValueError(f"{self.kind.value} label carries no instance_id")

    def __str__(self) -> str:
        if self.kind is DomainKind.SERVICE:
            return f"service:{self.instance_id}"
        return self.kind.value


HOME = TrustDomain(DomainKind.HOME)
CLOUD = TrustDomain(DomainKind.CLOUD)


def service_domain(instance_id: str) -> TrustDomain:
    return TrustDomain(DomainKind.SERVICE, instance_id)


class ItemState(str, enum.Enum):
    PLAINTEXT = "plaintext"
    PROTECTED = "protected"


def validate_flow(state: ItemState, source: TrustDomain, dest: TrustDomain) -> bool:
    """True iff an item in ``state`` may move from ``source`` to ``dest``.

    Plaintext stays inside the domain it is in; protected items go anywhere.
    """
    return source == dest or state is ItemState.PROTECTED


# --- protection policy ---------------------------------------------------------


class TimestampMode(str, enum.Enum):
    PLAIN = "plain"
    COARSENED = "coarsened"
    ENCRYPTED = "encrypted"


class LocationMode(str, enum.Enum):
    PLAIN = "plain"
    ENCRYPTED = "encrypted"
    DROPPED = "dropped"


class UnitMode(str, enum.Enum):
    PLAIN = "plain"
    ENCRYPTED = "encrypted"


@dataclass(frozen=True)
class ProtectionPolicy:
    """Owner's per-stream choice of which metadata to protect.

    The reading value is always encrypted; there is deliberately no field to turn
    that off.
    """

    timestamp_mode: TimestampMode = TimestampMode.PLAIN
    granularity_ms: int | None = None
    location_mode: LocationMode = LocationMode.PLAIN
    unit_mode: UnitMode = UnitMode.PLAIN

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamp_mode", TimestampMode(self.timestamp_mode))
        object.__setattr__(self, "location_mode", LocationMode(self.location_mode))
        object.__setattr__(self, "unit_mode", UnitMode(self.unit_mode))
        if self.timestamp_mode is TimestampMode.COARSENED:
            g = self.granularity_ms
            if isinstance(g, bool) or not isinstance(g, int) or g <= 0:
                raise InvalidPolicy("coarsened timestamps need granularity_ms > 0")
        elif self.granularity_ms is not None:
            raise InvalidPolicy("granularity_ms only applies to coarsened timestamps")

    @property
    def encrypt_value(self) -> bool:
        return True

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "location_mode": self.location_mode.value,
            "timestamp_mode": self.timestamp_mode.value,
            "unit_mode": self.unit_mode.value,
        }
        if self.granularity_ms is not None:
            d["granularity_ms"] = self.granularity_ms
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProtectionPolicy":
        if d.get("encrypt_value", True) is not True:
            raise InvalidPolicy("encrypt_value cannot be disabled")
        try:
            return cls(
                timestamp_mode=d.get("timestamp_mode", "plain"),
                granularity_ms=d.get("granularity_ms"),
                location_mode=d.get("location_mode", "plain"),
                unit_mode=d.get("unit_mode", "plain"),
            )
        except ValueError as exc:
            raise InvalidPolicy(str(exc)) from exc

    def with_field(self, field_name: str, mode: str) -> "ProtectionPolicy":
        """Return a copy with one field's mode changed (``coarsened:<ms>`` for timestamps)."""
        try:
            if field_name == "timestamp":
                if mode.startswith("coarsened:"):
                    return replace(self, timestamp_mode=TimestampMode.COARSENED,
                                   granularity_ms=int(mode.split(":", 1)[1]))
                return replace(self, timestamp_mode=TimestampMode(mode), granularity_ms=None)
            if field_name == "location":
                return replace(self, location_mode=LocationMode(mode))
            if field_name == "unit":
                return replace(self, unit_mode=UnitMode(mode))
        except ValueError as exc:
            raise InvalidPolicy(f"bad mode {mode!r} for {field_name}: {exc}") from exc
        if field_name == "value":
            raise InvalidPolicy("the value field is always encrypted")
        raise InvalidPolicy(f"unknown policy field {field_name!r}")


@dataclass(frozen=True)
class PolicyView:
    aad_fields: dict[str, Any]
    secret_fields: dict[str, Any]


def apply_policy_view(reading: SensorReading, policy: ProtectionPolicy) -> PolicyView:
    """Split a reading into header-visible (aad) and encrypted (secret) field maps.

    Values are already in canonical JSON form.  device_id and seq_hint identify
    the physical device and are always secret.
    """
    aad: dict[str, Any] = {}
    secret: dict[str, Any] = {"device_id": reading.device_id, "value": encode_value(reading.value)}
    if reading.seq_hint is not None:
        secret["seq_hint"] = reading.seq_hint

    if policy.timestamp_mode is TimestampMode.PLAIN:
        aad["timestamp"] = reading.timestamp
    elif policy.timestamp_mode is TimestampMode.COARSENED:
        g = policy.granularity_ms
        aad["timestamp"] = (reading.timestamp // g) * g
        aad["timestamp_granularity_ms"] = g
    else:
        secret["timestamp"] = reading.timestamp

    if reading.location_tag is not None:
        if policy.location_mode is LocationMode.PLAIN:
            aad["location_tag"] = reading.location_tag
        elif policy.location_mode is LocationMode.ENCRYPTED:
            secret["location_tag"] = reading.location_tag

    if policy.unit_mode is UnitMode.PLAIN:
        aad["unit"] = reading.unit
    else:
        secret["unit"] = reading.unit
    return PolicyView(aad, secret)


@dataclass(frozen=True)
class ReadingView:
    """What a key holder can reconstruct from a protected item.

    ``timestamp_granularity_ms`` is set when the timestamp is a bucket start;
    ``location_tag`` is None when it was dropped or never present.
    """

    stream_id: str
    device_id: str
    value: Value
    timestamp: int | None
    unit: str | None
    location_tag: str | None = None
    seq_hint: int | None = None
    timestamp_granularity_ms: int | None = None

    @property
    def timestamp_is_coarse(self) -> bool:
        return self.timestamp_granularity_ms is not None

    def to_reading(self) -> SensorReading:
        if self.timestamp is None or self.unit is None:
            raise InvalidReading("view is missing fields")
        return SensorReading(self.device_id, self.stream_id, self.timestamp, self.value,
                             self.unit, self.location_tag, self.seq_hint)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "device_id": self.device_id,
            "location_tag": self.location_tag,
            "seq_hint": self.seq_hint,
            "stream_id": self.stream_id,
            "timestamp": self.timestamp,
            "timestamp_granularity_ms": self.timestamp_granularity_ms,
            "unit": self.unit,
            "value": encode_value(self.value),
        }
        return d


_VIEW_FIELDS = {"device_id", "value", "seq_hint", "timestamp", "timestamp_granularity_ms",
                "location_tag", "unit"}


def merge_view(stream_id: str, aad_fields: dict[str, Any], secret_fields: dict[str, Any]) -> ReadingView:
    overlap = set(aad_fields) & set(secret_fields)
    if overlap:
        raise InvalidReading(f"fields present in both maps: {sorted(overlap)}")
    merged = {**aad_fields, **secret_fields}
    unknown = set(merged) - _VIEW_FIELDS
    if unknown:
        raise InvalidReading(f"unknown fields {sorted(unknown)}")
    try:
        return ReadingView(
            stream_id=stream_id,
            device_id=merged["device_id"],
            value=decode_value(merged["value"]),
            timestamp=merged.get("timestamp"),
            unit=merged.get("unit"),
            location_tag=merged.get("location_tag"),
            seq_hint=merged.get("seq_hint"),
            timestamp_granularity_ms=merged.get("timestamp_granularity_ms"),
        )
    except KeyError as exc:
        raise InvalidReading(f"missing field {exc}") from exc


def policy_view(reading: SensorReading, policy: ProtectionPolicy) -> ReadingView:
    pv = apply_policy_view(reading, policy)
    return merge_view(reading.stream_id, pv.aad_fields, pv.secret_fields)


# --- devices -------------------------------------------------------------------


@dataclass
class DeviceRegistration:
    device_id: str
    credential: bytes
    registered_streams: set[str] = field(default_factory=set)

    def to_dict(self) -> dict[str, Any]:
        return {
            "credential": self.credential.hex(),
            "device_id": self.device_id,
            "streams": sorted(self.registered_streams),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DeviceRegistration":
        return cls(d["device_id"], canonical.unhex(d["credential"], 32), set(d["streams"]))


class DeviceRegistry:
    def __init__(self, devices: Iterable[DeviceRegistration] = ()):
        self._devices: dict[str, DeviceRegistration] = {}
        for dev in devices:
            self.add(dev)

    def add(self, dev: DeviceRegistration) -> None:
        if dev.device_id in self._devices:
            raise ValueError(f"device {dev.device_id} already registered")
        if len(dev.credential) != 32:
            raise ValueError("credential must be 32 bytes")
        if any(hmac.compare_digest(d.credential, dev.credential) for d in self._devices.values()):
            raise ValueError("credential already in use by another device")
        self._devices[dev.device_id] = dev

    def register(self, device_id: str, streams: Iterable[str]) -> DeviceRegistration:
        dev = DeviceRegistration(device_id, secrets.token_bytes(32), set(streams))
        self.add(dev)
        return dev

    def authorize(self, credential: bytes, device_id: str, stream_id: str) -> None:
        dev = self._devices.get(device_id)
        # compare against a dummy when unknown so timing doesn't reveal registration
        expected = dev.credential if dev else b"\x00" * 32
        if not hmac.compare_digest(expected, credential) or dev is None:
            raise UnauthorizedDevice(f"device {device_id!r} not authorized")
        if stream_id not in dev.registered_streams:
            raise UnknownStream(f"stream {stream_id!r} not registered for device {device_id!r}")

    def streams(self) -> dict[str, str]:
        """stream_id -> device_id."""
        return {s: d.device_id for d in self._devices.values() for s in d.registered_streams}

    def __iter__(self):
        return iter(self._devices.values())

    def __len__(self) -> int:
        return len(self._devices)


# --- audit ---------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    audit_seq: int
    timestamp: int
    actor: str
    action: str
    subject: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "actor": self.actor,
            "audit_seq": self.audit_seq,
            "detail": self.detail,
            "subject": self.subject,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AuditRecord":
        return cls(d["audit_seq"], d["timestamp"], d["actor"], d["action"], d["subject"],
                   d.get("detail", ""))


class AuditLog:
    """Append-only audit trail, optionally mirrored to a newline-delimited JSON file."""

    def __init__(self, path: Path | None = None):
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()
        self.path = path
        if path is not None and path.exists():
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._records.append(AuditRecord.from_dict(json.loads(line)))

    def append(self, timestamp: int, actor: str, action: str, subject: str, detail: str = "") -> AuditRecord:
        with self._lock:
            seq = self._records[-1].audit_seq + 1 if self._records else 0
            rec = AuditRecord(seq, timestamp, actor, action, subject, detail)
            self._records.append(rec)
            if self.path is not None:
                with self.path.open("ab") as fh:
                    fh.write(canonical.dumps(rec.to_dict()) + b"\n")
            return rec

    def since(self, seq: int = 0) -> list[AuditRecord]:
        with self._lock:
            return [r for r in self._records if r.audit_seq >= seq]

    def __len__(self) -> int:
        return len(self._records)
