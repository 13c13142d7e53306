"""Per-item protection: stream keys, sealed items with hash chaining, key wrapping.

Primitives
    stream keys      HKDF-SHA256(master_secret, info="sensorcloud/stream-key/v1" || owner, stream, epoch)
    item sealing     ChaCha20-Poly1305, 256-bit key, 128-bit tag, nonce = SHA-256(key_id || seq)[:12]
    key wrapping     HPKE base mode, X25519 / HKDF-SHA256 / ChaCha20-Poly1305

The associated data of every item is its canonical header followed by its
chain digest, so neither can be altered without breaking the tag.  The chain
digest of item n hashes item n-1's tag, which makes deletion and reordering
visible to a verifier that walks the chain in order.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, hpke
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from sensorcloud import canonical
from sensorcloud.domain import (
    ProtectionPolicy,
    ReadingView,
    SensorReading,
    apply_policy_view,
    merge_view,
)
from sensorcloud.errors import (
    ChainBreak,
    IntegrityFailure,
    InvalidReading,
    MalformedItem,
    MalformedKey,
    SequenceViolation,
    UnknownStream,
    UnwrapError,
    WrongKey,
)

STREAM_KEY_TAG = b"sensorcloud/stream-key/v1"
KEY_ID_TAG = b"sensorcloud/key-id/v1"
NONCE_TAG = b"sensorcloud/nonce/v1"
CHAIN_TAG = b"sensorcloud/chain/v1"
ITEM_AAD_TAG = b"sensorcloud/item/v1\x00"
WRAP_TAG = b"sensorcloud/wrap/v1"

KEY_LEN = 32
TAG_LEN = 16
NONCE_LEN = 12
DIGEST_LEN = 32
GENESIS_TAG = bytes(TAG_LEN)

_AAD_KEYS = {"timestamp", "timestamp_granularity_ms", "location_tag", "unit"}
_HPKE = hpke.Suite(hpke.KEM.X25519, hpke.KDF.HKDF_SHA256, hpke.AEAD.CHACHA20_POLY1305)

# test hook: called with (key_id, nonce) for every sealing operation
_nonce_observer: Callable[[str, bytes], None] | None = None


def set_nonce_observer(fn: Callable[[str, bytes], None] | None) -> None:
    global _nonce_observer
    _nonce_observer = fn


# --- keys ----------------------------------------------------------------------


def _coords(owner_id: str, stream_id: str, epoch: int) -> bytes:
    return canonical.dumps([owner_id, stream_id, epoch])


def derive_key_id(owner_id: str, stream_id: str, epoch: int) -> str:
    return hashlib.sha256(KEY_ID_TAG + _coords(owner_id, stream_id, epoch)).hexdigest()


@dataclass(frozen=True)
class StreamKey:
    owner_id: str
    stream_id: str
    epoch: int
    key_bytes: bytes = field(repr=False)

    @property
    def key_id(self) -> str:
        return derive_key_id(self.owner_id, self.stream_id, self.epoch)


def derive_stream_key(master_secret: bytes, owner_id: str, stream_id: str, epoch: int) -> StreamKey:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=None,
                info=STREAM_KEY_TAG + _coords(owner_id, stream_id, epoch))
    return StreamKey(owner_id, stream_id, epoch, hkdf.derive(master_secret))


class KeyStore:
    """The owner's key hierarchy; lives only inside the trust point."""

    def __init__(self, owner_id: str, master_secret: bytes, epochs: Mapping[str, int] | None = None):
        if len(master_secret) != KEY_LEN:
            raise ValueError("master secret must be 32 bytes")
        self.owner_id = owner_id
        self._master = master_secret
        self._epochs: dict[str, int] = dict(epochs or {})
        self._cache: dict[tuple[str, int], StreamKey] = {}
        self._lock = threading.RLock()

    def add_stream(self, stream_id: str, epoch: int = 0) -> None:
        with self._lock:
            self._epochs.setdefault(stream_id, epoch)

    def streams(self) -> list[str]:
        return sorted(self._epochs)

    def current_epoch(self, stream_id: str) -> int:
        try:
            return self._epochs[stream_id]
        except KeyError:
            raise UnknownStream(stream_id) from None

    def key(self, stream_id: str, epoch: int | None = None) -> StreamKey:
        with self._lock:
            cur = self.current_epoch(stream_id)
            if epoch is None:
                epoch = cur
            k = self._cache.get((stream_id, epoch))
            if k is None:
                k = derive_stream_key(self._master, self.owner_id, stream_id, epoch)
                self._cache[(stream_id, epoch)] = k
            return k

    def rotate(self, stream_id: str) -> int:
        with self._lock:
            new = self.current_epoch(stream_id) + 1
            self._epochs[stream_id] = new
            return new

    def epochs(self) -> dict[str, int]:
        return dict(self._epochs)


def rotate_epoch(keystore: KeyStore, stream_id: str) -> int:
    return keystore.rotate(stream_id)


# --- protected items -------------------------------------------------------------


@dataclass(frozen=True)
class ItemHeader:
    owner_id: str
    stream_id: str
    epoch: int
    seq: int
    key_id: str
    aad_fields: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "aad_fields": self.aad_fields,
            "epoch": self.epoch,
            "key_id": self.key_id,
            "owner_id": self.owner_id,
            "seq": self.seq,
            "stream_id": self.stream_id,
        }

    def canonical_bytes(self) -> bytes:
        return canonical.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Any) -> "ItemHeader":
        if not isinstance(d, dict) or set(d) != {"aad_fields", "epoch", "key_id", "owner_id", "seq", "stream_id"}:
            raise MalformedItem("header has wrong field set")
        for name in ("owner_id", "stream_id"):
            if not isinstance(d[name], str) or not d[name]:
                raise MalformedItem(f"header {name} must be a non-empty string")
        for name in ("epoch", "seq"):
            v = d[name]
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise MalformedItem(f"header {name} must be a non-negative integer")
        try:
            canonical.unhex(d["key_id"], DIGEST_LEN)
        except ValueError as exc:
            raise MalformedItem(f"header key_id: {exc}") from None
        aad = d["aad_fields"]
        if not isinstance(aad, dict) or not set(aad) <= _AAD_KEYS:
            raise MalformedItem("header aad_fields malformed")
        return cls(d["owner_id"], d["stream_id"], d["epoch"], d["seq"], d["key_id"], aad)


@dataclass(frozen=True)
class ProtectedDataItem:
    header: ItemHeader
    ciphertext: bytes
    auth_tag: bytes
    chain_digest: bytes

    @property
    def coords(self) -> tuple[str, str, int, int]:
        h = self.header
        return (h.owner_id, h.stream_id, h.epoch, h.seq)

    def to_wire(self) -> dict[str, Any]:
        return {
            "auth_tag": self.auth_tag.hex(),
            "chain_digest": self.chain_digest.hex(),
            "ciphertext": self.ciphertext.hex(),
            "header": self.header.to_dict(),
        }

    def to_bytes(self) -> bytes:
        return canonical.dumps(self.to_wire())

    @classmethod
    def from_wire(cls, d: Any) -> "ProtectedDataItem":
        if not isinstance(d, dict) or set(d) != {"auth_tag", "chain_digest", "ciphertext", "header"}:
            raise MalformedItem("item has wrong field set")
        header = ItemHeader.from_dict(d["header"])
        try:
            tag = canonical.unhex(d["auth_tag"], TAG_LEN)
            chain = canonical.unhex(d["chain_digest"], DIGEST_LEN)
            ct = canonical.unhex(d["ciphertext"])
        except ValueError as exc:
            raise MalformedItem(str(exc)) from None
        return cls(header, ct, tag, chain)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtectedDataItem":
        """Strict parse: the input must already be in canonical form."""
        try:
            obj = canonical.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedItem(f"not canonical JSON: {exc}") from None
        item = cls.from_wire(obj)
        if item.to_bytes() != data:
            raise MalformedItem("item encoding is not canonical")
        return item


def item_nonce(key_id: str, seq: int) -> bytes:
    return hashlib.sha256(NONCE_TAG + bytes.fromhex(key_id) + seq.to_bytes(8, "big")).digest()[:NONCE_LEN]


def compute_chain_digest(prev_tag: bytes, header: ItemHeader) -> bytes:
    return hashlib.sha256(CHAIN_TAG + prev_tag + header.canonical_bytes()).digest()


def _item_aad(header: ItemHeader, chain_digest: bytes) -> bytes:
    return ITEM_AAD_TAG + header.canonical_bytes() + chain_digest


class SequenceGuard:
    """Producer-side record of the next expected seq per key; refuses gaps and repeats."""

    def __init__(self, state: Mapping[str, int] | None = None):
        self._next: dict[str, int] = dict(state or {})
        self._lock = threading.Lock()

    def expected(self, key_id: str) -> int:
        return self._next.get(key_id, 0)

    def claim(self, key_id: str, seq: int) -> None:
        with self._lock:
            exp = self._next.get(key_id, 0)
            if seq != exp:
                raise SequenceViolation(f"seq {seq} for key {key_id[:12]}, expected {exp}")
            self._next[key_id] = exp + 1

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._next)


def protect(
    reading: SensorReading,
    policy: ProtectionPolicy,
    key: StreamKey,
    prev_tag: bytes,
    seq: int,
    *,
    guard: SequenceGuard | None = None,
) -> ProtectedDataItem:
    """Seal one reading under ``key`` as item ``seq`` of its (stream, epoch) chain.

    Without a ``guard`` only the local genesis rule is checked (seq 0 chains
    from the all-zero tag and nothing else does); producers that keep state
    across calls must pass one to rule out nonce reuse.
    """
    if key.stream_id != reading.stream_id:
        raise WrongKey(f"key for stream {key.stream_id!r} used on {reading.stream_id!r}")
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise SequenceViolation("seq must be a non-negative integer")
    if len(prev_tag) != TAG_LEN:
        raise SequenceViolation("prev_tag must be 16 bytes")
    if (seq == 0) != (prev_tag == GENESIS_TAG):
        raise SequenceViolation("seq 0 must chain from the genesis tag and only seq 0 may")
    key_id = key.key_id
    if guard is not None:
        guard.claim(key_id, seq)

    view = apply_policy_view(reading, policy)
    header = ItemHeader(key.owner_id, key.stream_id, key.epoch, seq, key_id, view.aad_fields)
    chain = compute_chain_digest(prev_tag, header)
    nonce = item_nonce(key_id, seq)
    if _nonce_observer is not None:
        _nonce_observer(key_id, nonce)
    sealed = ChaCha20Poly1305(key.key_bytes).encrypt(
        nonce, canonical.dumps(view.secret_fields), _item_aad(header, chain)
    )
    return ProtectedDataItem(header, sealed[:-TAG_LEN], sealed[-TAG_LEN:], chain)


def verify_and_unprotect(item: ProtectedDataItem, key: StreamKey, prev_tag: bytes) -> ReadingView:
    h = item.header
    if key.key_id != h.key_id:
        raise WrongKey(f"item sealed under {h.key_id[:12]}, key is {key.key_id[:12]}")
    try:
        plaintext = ChaCha20Poly1305(key.key_bytes).decrypt(
            item_nonce(h.key_id, h.seq), item.ciphertext + item.auth_tag,
            _item_aad(h, item.chain_digest),
        )
    except InvalidTag:
        raise IntegrityFailure(f"tag mismatch at {h.stream_id}/{h.epoch}/{h.seq}") from None
    if compute_chain_digest(prev_tag, h) != item.chain_digest:
        raise ChainBreak(f"chain broken at {h.stream_id}/{h.epoch}/{h.seq}", seq=h.seq)
    try:
        secret = canonical.loads(plaintext)
        return merge_view(h.stream_id, h.aad_fields, secret)
    except (ValueError, InvalidReading) as exc:
        raise IntegrityFailure(f"authenticated payload malformed: {exc}") from None


def try_open(item: ProtectedDataItem, key_bytes: bytes) -> ReadingView:
    """Attempt the AEAD alone with arbitrary key bytes, ignoring key_id and chain.

    For forensic checks that a key really cannot open an item; normal readers
    use :func:`verify_and_unprotect`.
    """
    h = item.header
    try:
        plaintext = ChaCha20Poly1305(key_bytes).decrypt(
            item_nonce(h.key_id, h.seq), item.ciphertext + item.auth_tag,
            _item_aad(h, item.chain_digest),
        )
        return merge_view(h.stream_id, h.aad_fields, canonical.loads(plaintext))
    except (InvalidTag, ValueError, InvalidReading):
        raise IntegrityFailure(f"cannot open {h.stream_id}/{h.epoch}/{h.seq}") from None


@dataclass
class ChainCursor:
    """Last verified position of one (stream, epoch) chain."""

    last_seq: int = -1
    last_tag: bytes = GENESIS_TAG

    def to_dict(self) -> dict[str, Any]:
        return {"last_seq": self.last_seq, "last_tag": self.last_tag.hex()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChainCursor":
        return cls(d["last_seq"], bytes.fromhex(d["last_tag"]))


def verify_chain(
    items: Iterable[ProtectedDataItem],
    keys: Callable[[str, str, int], StreamKey],
    cursors: Mapping[tuple[str, str, int], ChainCursor] | None = None,
) -> list[ReadingView]:
    """Verify items in order, each epoch's chain starting at genesis.

    ``cursors`` (optional) holds previously verified chain positions; a chain
    that ends before a known cursor has been truncated and raises ChainBreak at
    the position where the missing item should have been.  Raised ChainBreaks
    carry ``position``, the index into ``items`` of the first affected entry.
    """
    views: list[ReadingView] = []
    tails: dict[tuple[str, str, int], tuple[int, bytes]] = {}
    for pos, item in enumerate(items):
        h = item.header
        coord = (h.owner_id, h.stream_id, h.epoch)
        prev = tails.get(coord, (-1, GENESIS_TAG))[1]
        try:
            views.append(verify_and_unprotect(item, keys(*coord), prev))
        except ChainBreak as exc:
            exc.position = pos
            raise
        tails[coord] = (h.seq, item.auth_tag)
    pos = len(views)
    for coord, cur in (cursors or {}).items():
        seen_seq = tails.get(coord, (-1, GENESIS_TAG))[0]
        if cur.last_seq > seen_seq:
            raise ChainBreak(f"chain for {coord[1]}/{coord[2]} truncated before seq {cur.last_seq}",
                             position=pos, seq=seen_seq + 1)
    return views


# --- key wrapping ----------------------------------------------------------------


def load_public_key(raw: bytes | str | x25519.X25519PublicKey) -> x25519.X25519PublicKey:
    if isinstance(raw, x25519.X25519PublicKey):
        return raw
    try:
        data = canonical.unhex(raw, KEY_LEN) if isinstance(raw, str) else bytes(raw)
    except ValueError as exc:
        raise MalformedKey(f"public key: {exc}") from None
    if len(data) != KEY_LEN or data == bytes(KEY_LEN):
        raise MalformedKey("public key must be 32 non-zero bytes")
    return x25519.X25519PublicKey.from_public_bytes(data)


@dataclass(frozen=True)
class WrappedKey:
    stream_id: str
    epoch: int
    wrapped_key: bytes

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "stream_id": self.stream_id, "wrapped_key": self.wrapped_key.hex()}


@dataclass(frozen=True)
class WrappedKeySet:
    grant_id: str
    grantee_instance_id: str
    owner_id: str
    entries: tuple[WrappedKey, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "grant_id": self.grant_id,
            "grantee_instance_id": self.grantee_instance_id,
            "owner_id": self.owner_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "WrappedKeySet":
        try:
            entries = tuple(
                WrappedKey(e["stream_id"], e["epoch"], canonical.unhex(e["wrapped_key"]))
                for e in d["entries"]
            )
            return cls(d["grant_id"], d["grantee_instance_id"], d["owner_id"], entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise UnwrapError(f"malformed wrapped key set: {exc}") from None

    def coverage(self) -> set[tuple[str, int]]:
        return {(e.stream_id, e.epoch) for e in self.entries}


def _wrap_info(grant_id: str, grantee: str, owner_id: str, stream_id: str, epoch: int) -> bytes:
    return WRAP_TAG + canonical.dumps([grant_id, grantee, owner_id, stream_id, epoch])


def wrap_keys(
    keys: Iterable[StreamKey],
    grantee_public_key: bytes | str | x25519.X25519PublicKey,
    *,
    grant_id: str,
    grantee_instance_id: str,
    owner_id: str,
) -> WrappedKeySet:
    pub = load_public_key(grantee_public_key)
    entries = []
    for k in keys:
        if k.owner_id != owner_id:
            raise ValueError("all wrapped keys must belong to the grant's owner")
        info = _wrap_info(grant_id, grantee_instance_id, owner_id, k.stream_id, k.epoch)
        try:
            ct = _HPKE.encrypt(k.key_bytes, pub, info=info)
        except Exception as exc:  # low-order points are rejected by the KEM
            raise MalformedKey(f"cannot encrypt to grantee key: {exc}") from None
        entries.append(WrappedKey(k.stream_id, k.epoch, ct))
    return WrappedKeySet(grant_id, grantee_instance_id, owner_id, tuple(entries))


def unwrap_keys(wks: WrappedKeySet, private_key: x25519.X25519PrivateKey) -> list[StreamKey]:
    """All-or-nothing: any entry that fails to open fails the whole set."""
    out = []
    for e in wks.entries:
        info = _wrap_info(wks.grant_id, wks.grantee_instance_id, wks.owner_id, e.stream_id, e.epoch)
        try:
            raw = _HPKE.decrypt(e.wrapped_key, private_key, info=info)
        except Exception:
            raise UnwrapError(f"cannot unwrap key for {e.stream_id}/{e.epoch}") from None
        if len(raw) != KEY_LEN:
            raise UnwrapError("unwrapped key has wrong length")
        out.append(StreamKey(wks.owner_id, e.stream_id, e.epoch, raw))
    return out
