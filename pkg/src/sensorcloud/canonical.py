"""Deterministic JSON encoding used as MAC/AEAD input and on the wire.

Keys sorted, no whitespace, UTF-8, integers as decimal.  Byte strings never
appear raw; callers hex-encode them (lowercase) before serialization.
"""

from __future__ import annotations

import json
import re
from typing import Any

_HEX_RE = re.compile(r"\A(?:[0-9a-f]{2})*\Z")


def dumps(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def dumps_str(obj: Any) -> str:
    return dumps(obj).decode("utf-8")


def loads(data: bytes | str) -> Any:
    return json.loads(data)


def hexlify(data: bytes) -> str:
    return data.hex()


def unhex(text: str, length: int | None = None) -> bytes:
    """Strict lowercase-hex decode; raises ValueError on anything non-canonical."""
    if not isinstance(text, str) or not _HEX_RE.match(text):
        raise ValueError("expected lowercase hex string")
    raw = bytes.fromhex(text)
    if length is not None and len(raw) != length:
        raise ValueError(f"expected {length} bytes, got {len(raw)}")
    return raw
