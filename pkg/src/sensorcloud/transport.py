"""Mutually authenticated, encrypted sessions between daemons.

Handshake (signed ephemeral Diffie-Hellman, station-to-station style)::

    I -> R  HELLO      {version, role, static, eph}
    R -> I  HELLO_ACK  {version, role, static, eph, sig_R(th)}
    I -> R  FINISH     {sig_I(th)}

``th`` is SHA-256 over HELLO and HELLO_ACK-without-signature, so both roles, both
static keys and both ephemerals are bound.  Each side checks the peer's role
and static key against its pins before anything else happens.  Session keys:
HKDF-SHA256(X25519(eph_I, eph_R), salt=th) -> k_i2r || k_r2i || session_id.

Every message is a frame: 4-byte big-endian length, then the body.  After the
handshake a body is ``counter(8) || ChaCha20-Poly1305(ciphertext || tag)`` with
nonce ``0x00000000 || counter`` and the session id as associated data.  The
receiver accepts only the exact next counter; anything else closes the session.
"""

from __future__ import annotations

import hashlib
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from sensorcloud import canonical
from sensorcloud.errors import AuthFailure, Downgrade, FrameIntegrityError, ReplayDetected, SessionClosed

PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
_HS_LABEL_R = b"sensorcloud/hs/responder"
_HS_LABEL_I = b"sensorcloud/hs/initiator"
_KDF_INFO = b"sensorcloud/transport/v1"


def role_kind(role: str) -> str:
    """'trust-point:alice' -> 'trust-point'; 'cloud' -> 'cloud'."""
    return role.split(":", 1)[0]


def role_subject(role: str) -> str:
    return role.split(":", 1)[1] if ":" in role else ""


@dataclass
class Identity:
    role: str
    signing_key: ed25519.Ed25519PrivateKey
    pins: dict[str, bytes] = field(default_factory=dict)

    @classmethod
    def generate(cls, role: str) -> "Identity":
        return cls(role, ed25519.Ed25519PrivateKey.generate())

    @property
    def public_bytes(self) -> bytes:
        return self.signing_key.public_key().public_bytes_raw()

    def pin(self, role: str, public: bytes | str) -> None:
        self.pins[role] = bytes.fromhex(public) if isinstance(public, str) else public

    def to_dict(self) -> dict[str, Any]:
        return {
            "pins": {r: k.hex() for r, k in sorted(self.pins.items())},
            "role": self.role,
            "signing_key": self.signing_key.private_bytes_raw().hex(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Identity":
        key = ed25519.Ed25519PrivateKey.from_private_bytes(bytes.fromhex(d["signing_key"]))
        return cls(d["role"], key, {r: bytes.fromhex(k) for r, k in d.get("pins", {}).items()})


# --- framing -------------------------------------------------------------------


class Channel(Protocol):
    def sendall(self, data: bytes) -> None: ...
    def recv(self, n: int) -> bytes: ...
    def close(self) -> None: ...


def _recv_exact(ch: Channel, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = ch.recv(n - len(buf))
        except (ConnectionError, OSError) as exc:
            raise SessionClosed(f"connection error: {exc}") from None
        if not chunk:
            if buf:
                raise SessionClosed("connection closed mid-frame (truncated)")
            raise SessionClosed("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def write_frame(ch: Channel, body: bytes) -> None:
    if len(body) > MAX_FRAME:
        raise ValueError("frame too large")
    try:
        ch.sendall(struct.pack(">I", len(body)) + body)
    except (ConnectionError, OSError) as exc:
        raise SessionClosed(f"send failed: {exc}") from None


def read_frame(ch: Channel) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(ch, 4))
    if length > MAX_FRAME:
        raise SessionClosed("oversized frame")
    return _recv_exact(ch, length)


# --- sessions ------------------------------------------------------------------


class Session:
    """One live encrypted pipe.  Any framing, counter or tag error closes it for good."""

    def __init__(self, ch: Channel, role: str, peer_role: str, send_key: bytes, recv_key: bytes,
                 session_id: bytes):
        self.channel = ch
        self.role = role
        self.peer_role = peer_role
        self.session_id = session_id
        self._send_aead = ChaCha20Poly1305(send_key)
        self._recv_aead = ChaCha20Poly1305(recv_key)
        self.send_counter = 0
        self.recv_counter = 0
        self.closed = False
        self.close_reason: str | None = None
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    def _fail(self, exc: SessionClosed) -> SessionClosed:
        self.close(str(exc))
        return exc

    def send_frame(self, body: bytes) -> None:
        with self._send_lock:
            if self.closed:
                raise SessionClosed(f"session closed: {self.close_reason}")
            ctr = struct.pack(">Q", self.send_counter)
            sealed = self._send_aead.encrypt(b"\x00\x00\x00\x00" + ctr, body, self.session_id)
            self.send_counter += 1
            try:
                write_frame(self.channel, ctr + sealed)
            except SessionClosed as exc:
                raise self._fail(exc) from None

    def recv_frame(self) -> bytes:
        with self._recv_lock:
            if self.closed:
                raise SessionClosed(f"session closed: {self.close_reason}")
            try:
                frame = read_frame(self.channel)
            except SessionClosed as exc:
                raise self._fail(exc) from None
            if len(frame) < 8 + 16:
                raise self._fail(FrameIntegrityError("frame too short"))
            ctr = frame[:8]
            (n,) = struct.unpack(">Q", ctr)
            if n != self.recv_counter:
                raise self._fail(ReplayDetected(f"frame counter {n}, expected {self.recv_counter}"))
            try:
                body = self._recv_aead.decrypt(b"\x00\x00\x00\x00" + ctr, frame[8:], self.session_id)
            except InvalidTag:
                raise self._fail(FrameIntegrityError(f"frame {n} failed authentication")) from None
            self.recv_counter += 1
            return body

    def close(self, reason: str = "closed locally") -> None:
        if not self.closed:
            self.closed = True
            self.close_reason = reason
            try:
                self.channel.close()
            except OSError:
                pass


def _transcript(hello: dict, ack_unsigned: dict) -> bytes:
    return hashlib.sha256(canonical.dumps(hello) + canonical.dumps(ack_unsigned)).digest()


def _derive(shared: bytes, th: bytes) -> tuple[bytes, bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=80, salt=th, info=_KDF_INFO).derive(shared)
    return okm[:32], okm[32:64], okm[64:]


def _read_json(ch: Channel) -> dict:
    try:
        obj = canonical.loads(read_frame(ch))
    except ValueError:
        raise AuthFailure("malformed handshake message") from None
    if not isinstance(obj, dict):
        raise AuthFailure("malformed handshake message")
    return obj


def _check_pin(identity: Identity, role: Any, static_hex: Any) -> ed25519.Ed25519PublicKey:
    if not isinstance(role, str) or role not in identity.pins:
        raise AuthFailure(f"peer role {role!r} is not pinned")
    try:
        static = canonical.unhex(static_hex, 32)
    except ValueError:
        raise AuthFailure("malformed peer static key") from None
    if static != identity.pins[role]:
        raise AuthFailure(f"peer key for {role!r} does not match pin")
    return ed25519.Ed25519PublicKey.from_public_bytes(static)


def _eph_pub(msg: dict) -> x25519.X25519PublicKey:
    try:
        return x25519.X25519PublicKey.from_public_bytes(canonical.unhex(msg.get("eph"), 32))
    except ValueError:
        raise AuthFailure("malformed ephemeral key") from None


def handshake_initiator(
    identity: Identity,
    ch: Channel,
    expected_peer_role: str | None = None,
    *,
    ephemeral: x25519.X25519PrivateKey | None = None,
    version: int = PROTOCOL_VERSION,
) -> Session:
    eph = ephemeral or x25519.X25519PrivateKey.generate()
    hello = {
        "eph": eph.public_key().public_bytes_raw().hex(),
        "role": identity.role,
        "static": identity.public_bytes.hex(),
        "type": "HELLO",
        "version": version,
    }
    try:
        write_frame(ch, canonical.dumps(hello))
        ack = _read_json(ch)
        if ack.get("type") != "HELLO_ACK":
            raise AuthFailure("expected HELLO_ACK")
        if ack.get("version") != version:
            raise Downgrade(f"responder speaks version {ack.get('version')!r}, we speak {version}")
        peer_role = ack.get("role")
        if expected_peer_role is not None and peer_role != expected_peer_role:
            raise AuthFailure(f"expected peer {expected_peer_role!r}, got {peer_role!r}")
        peer_key = _check_pin(identity, peer_role, ack.get("static"))
        unsigned = {k: v for k, v in ack.items() if k != "sig"}
        th = _transcript(hello, unsigned)
        try:
            peer_key.verify(canonical.unhex(ack.get("sig"), 64), _HS_LABEL_R + th)
        except (InvalidSignature, ValueError):
            raise AuthFailure("responder signature invalid") from None
        sig = identity.signing_key.sign(_HS_LABEL_I + th)
        write_frame(ch, canonical.dumps({"sig": sig.hex(), "type": "FINISH"}))
        k_i2r, k_r2i, sid = _derive(eph.exchange(_eph_pub(ack)), th)
    except (AuthFailure, Downgrade, SessionClosed):
        try:
            ch.close()
        except OSError:
            pass
        raise
    return Session(ch, identity.role, peer_role, k_i2r, k_r2i, sid)


def handshake_responder(
    identity: Identity,
    ch: Channel,
    *,
    ephemeral: x25519.X25519PrivateKey | None = None,
    version: int = PROTOCOL_VERSION,
) -> Session:
    eph = ephemeral or x25519.X25519PrivateKey.generate()
    try:
        hello = _read_json(ch)
        if hello.get("type") != "HELLO":
            raise AuthFailure("expected HELLO")
        if hello.get("version") != version:
            raise Downgrade(f"initiator speaks version {hello.get('version')!r}, we speak {version}")
        peer_role = hello.get("role")
        peer_key = _check_pin(identity, peer_role, hello.get("static"))
        peer_eph = _eph_pub(hello)
        unsigned = {
            "eph": eph.public_key().public_bytes_raw().hex(),
            "role": identity.role,
            "static": identity.public_bytes.hex(),
            "type": "HELLO_ACK",
            "version": version,
        }
        th = _transcript(hello, unsigned)
        sig = identity.signing_key.sign(_HS_LABEL_R + th)
        write_frame(ch, canonical.dumps({**unsigned, "sig": sig.hex()}))
        fin = _read_json(ch)
        if fin.get("type") != "FINISH":
            raise AuthFailure("expected FINISH")
        try:
            peer_key.verify(canonical.unhex(fin.get("sig"), 64), _HS_LABEL_I + th)
        except (InvalidSignature, ValueError):
            raise AuthFailure("initiator signature invalid") from None
        k_i2r, k_r2i, sid = _derive(eph.exchange(peer_eph), th)
    except (AuthFailure, Downgrade, SessionClosed):
        try:
            ch.close()
        except OSError:
            pass
        raise
    return Session(ch, identity.role, peer_role, k_r2i, k_i2r, sid)


def connect(identity: Identity, host: str, port: int, expected_peer_role: str = "cloud",
            timeout: float | None = 30.0) -> Session:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise SessionClosed(f"cannot reach {host}:{port}: {exc}") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return handshake_initiator(identity, sock, expected_peer_role)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)
