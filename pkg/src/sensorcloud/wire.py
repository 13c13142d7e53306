"""Application messages carried inside transport frames.

Every body is canonical JSON with a ``type`` field.  Requests and their replies:

    STORE {item}                               -> STORE_ACK {owner_id, stream_id, epoch, seq, duplicate}
    QUERY {owner_id, stream_id, epochs, seqs}  -> QUERY_RESULT {items}
    REGISTER {manifest, public_key}            -> REGISTER_ACK {instance_id}
    RELAY {to, body, from_instance?}           -> RELAY_ACK {}
    FETCH_INBOX {address}                      -> INBOX {messages}
    LOOKUP_SERVICE {instance_id}               -> SERVICE_INFO {instance_id, public_key, manifest}
    GRANT_UPSERT {entry} / GRANT_REMOVE {grant_id} -> OK {}
    DUMP_STATE {}                              -> STATE {snapshot}

Any request may instead be answered with ERROR {error, message}.

RELAY bodies are themselves canonical JSON strings with a ``kind``:
grant_request (service -> trust point), grant_decision and wrapped_keys
(trust point -> service).  The cloud forwards them untouched.
"""

from __future__ import annotations

from typing import Any

from sensorcloud import canonical
from sensorcloud.errors import BadRequest, SensorCloudError, from_wire
from sensorcloud.transport import Session

STORE = "STORE"
STORE_ACK = "STORE_ACK"
QUERY = "QUERY"
QUERY_RESULT = "QUERY_RESULT"
REGISTER = "REGISTER"
REGISTER_ACK = "REGISTER_ACK"
RELAY = "RELAY"
RELAY_ACK = "RELAY_ACK"
FETCH_INBOX = "FETCH_INBOX"
INBOX = "INBOX"
LOOKUP_SERVICE = "LOOKUP_SERVICE"
SERVICE_INFO = "SERVICE_INFO"
GRANT_UPSERT = "GRANT_UPSERT"
GRANT_REMOVE = "GRANT_REMOVE"
OK = "OK"
DUMP_STATE = "DUMP_STATE"
STATE = "STATE"
ERROR = "ERROR"

GRANT_REQUEST = "grant_request"
GRANT_DECISION = "grant_decision"
WRAPPED_KEYS = "wrapped_keys"
RELAY_KINDS = (GRANT_REQUEST, GRANT_DECISION, WRAPPED_KEYS)


def trust_point_address(owner_id: str) -> str:
    return f"trust-point:{owner_id}"


def instance_address(instance_id: str) -> str:
    return f"instance:{instance_id}"


def error_body(exc: SensorCloudError) -> dict[str, Any]:
    return {"error": exc.code, "message": str(exc), "type": ERROR}


def decode(body: bytes) -> dict[str, Any]:
    try:
        msg = canonical.loads(body)
    except ValueError as exc:
        raise BadRequest(f"body is not JSON: {exc}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise BadRequest("message must be an object with a type")
    return msg


def call(session: Session, msg: dict[str, Any], expect: str | None = None) -> dict[str, Any]:
    """Send one request and wait for its reply; ERROR replies are raised as typed errors."""
    session.send_frame(canonical.dumps(msg))
    reply = decode(session.recv_frame())
    if reply["type"] == ERROR:
        raise from_wire(reply.get("error", "SensorCloudError"), reply.get("message", ""))
    if expect is not None and reply["type"] != expect:
        raise BadRequest(f"expected {expect}, got {reply['type']}")
    return reply
