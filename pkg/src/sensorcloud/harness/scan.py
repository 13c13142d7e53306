"""Byte-scan oracle for the curious-cloud verdict.

A secret counts as leaked if it appears raw, as lower- or upper-case hex, or as
standard or URL-safe base64 at any of the three byte alignments.  Base64 forms
are cut to the characters that depend only on the needle, so a hit is found
wherever the needle sits inside a larger encoded blob.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Iterable


def _b64_core(needle: bytes, shift: int) -> list[bytes]:
    padded = b"\x00" * shift + needle
    out = []
    for enc in (base64.b64encode, base64.urlsafe_b64encode):
        text = enc(padded).rstrip(b"=")
        # skip chars mixing in the zero padding; drop the trailing char, which
        # depends on whatever follows the needle
        start = (shift * 8 + 5) // 6
        end = (len(padded) * 8) // 6
        core = text[start:end]
        if len(core) >= max(4, len(needle)):
            out.append(core)
    return out


def encodings(needle: bytes) -> list[bytes]:
    forms = [needle, needle.hex().encode(), needle.hex().upper().encode()]
    for shift in range(3):
        forms += _b64_core(needle, shift)
    return list(dict.fromkeys(forms))


def count(haystack: bytes, needle: bytes) -> int:
    n = 0
    for form in encodings(needle):
        start = 0
        while (i := haystack.find(form, start)) != -1:
            n += 1
            start = i + 1
    return n


@dataclass
class ScanResult:
    sentinel_hits: int = 0
    key_hits: int = 0
    scanned_bytes: int = 0
    leaked: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return self.sentinel_hits == 0 and self.key_hits == 0


def scan(blobs: Iterable[bytes], sentinel_prefix: bytes, sentinels: Iterable[bytes],
         secrets: Iterable[bytes]) -> ScanResult:
    """Count sentinel and secret occurrences across ``blobs``.

    Every sentinel starts with ``sentinel_prefix``, so the prefix is searched
    first; only a prefix hit triggers the per-sentinel search.  Zero prefix
    hits soundly implies zero sentinel hits.
    """
    res = ScanResult()
    secrets = list(secrets)
    sentinels = list(sentinels)
    for blob in blobs:
        res.scanned_bytes += len(blob)
        if count(blob, sentinel_prefix):
            for s in sentinels:
                c = count(blob, s)
                if c:
                    res.sentinel_hits += c
                    res.leaked.append(f"sentinel {s.decode(errors='replace')}")
        for k in secrets:
            c = count(blob, k)
            if c:
                res.key_hits += c
                res.leaked.append(f"secret {k.hex()[:8]}...")
    return res
