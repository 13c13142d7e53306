"""Deterministic smart-home sensor simulator.

Time is simulated: tick ``t`` of a profile is stamped ``start_ms + t * period_ms``.
Values depend only on (run seed, profile, tick), so two runs with the same
inputs produce byte-identical ground-truth logs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import random
import socket
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from sensorcloud import canonical
from sensorcloud.domain import SensorReading
from sensorcloud.errors import IngestRejected
from sensorcloud.transport import parse_endpoint

KINDS = ("Temperature", "DoorContact", "PowerMeter")
DAY_MS = 86_400_000
START_MS = 1_700_000_000_000
SENTINEL_PREFIX = "SENTINEL"


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    kind: str
    stream_id: str
    credential: str = ""  # hex; the device's ingest credential
    period_ms: int = 1000
    base: float = 0.0
    amplitude: float = 0.0
    noise: float = 0.0
    seed: str = "0"
    unit: str = ""
    location: str | None = None
    sentinels: bool = False  # plant a 16-byte marker in every location_tag

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown device kind {self.kind!r}")
        if self.period_ms <= 0:
            raise ValueError("period_ms must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        d["seed"] = str(d.get("seed", "0"))
        return cls(**d)


def _rng(seed: str, profile: DeviceProfile, tick: int | str) -> random.Random:
    return random.Random(f"{seed}|{profile.device_id}|{profile.seed}|{tick}")


def sentinel(seed: str, profile: DeviceProfile, tick: int) -> str:
    """16 ASCII bytes, unique per (run seed, device, tick), sharing a fixed prefix."""
    digest = hashlib.sha256(f"{seed}|{profile.device_id}|{tick}".encode()).hexdigest()
    return SENTINEL_PREFIX + digest[:8]


# walk state per (seed, profile); extended lazily so generate() stays O(1) amortized
_walks: dict[tuple[str, DeviceProfile], list] = {}


def _walk(seed: str, profile: DeviceProfile, tick: int) -> list:
    key = (seed, profile)
    w = _walks.get(key)
    if w is None:
        rng = _rng(seed, profile, "walk")
        w = _walks[key] = [rng, []]
    rng, vals = w
    while len(vals) <= tick:
        if profile.kind == "PowerMeter":
            prev = vals[-1] if vals else max(profile.base, 0.0)
            vals.append(max(0.0, prev + rng.gauss(0.0, profile.noise)))
        else:
            prev = vals[-1] if vals else 0
            vals.append(1 - prev if rng.random() < 0.1 else prev)
    return vals


def generate(profile: DeviceProfile, tick: int, seed: str = "0") -> SensorReading:
    if tick < 0:
        raise ValueError("tick must be >= 0")
    ts = START_MS + tick * profile.period_ms
    value: float | int
    if profile.kind == "Temperature":
        day_ticks = DAY_MS / profile.period_ms
        value = profile.base + profile.amplitude * math.sin(2 * math.pi * tick / day_ticks)
        if profile.noise:
            value += _rng(seed, profile, tick).gauss(0.0, profile.noise)
        value = round(value, 4)
    elif profile.kind == "DoorContact":
        value = _walk(seed, profile, tick)[tick]
    else:
        value = round(_walk(seed, profile, tick)[tick], 3)
    loc = profile.location
    if profile.sentinels:
        loc = sentinel(seed, profile, tick)
    return SensorReading(profile.device_id, profile.stream_id, ts, value, profile.unit, loc)


def schedule(profiles: Iterable[DeviceProfile], duration_ticks: int, seed: str = "0",
             start_tick: int = 0) -> Iterator[SensorReading]:
    """All readings of a run, in timestamp order (ties broken by profile order)."""
    profiles = list(profiles)
    events = sorted(
        (START_MS + t * p.period_ms, i, t) for i, p in enumerate(profiles)
        for t in range(start_tick, start_tick + duration_ticks)
    )
    for _, i, t in events:
        yield generate(profiles[i], t, seed)


def load_profiles(path: Path) -> list[DeviceProfile]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["profiles"]
    return [DeviceProfile.from_dict(d) for d in data]


class IngestClient:
    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.fh = self.sock.makefile("rwb")

    def send(self, credential: str, reading: SensorReading) -> None:
        self.fh.write(canonical.dumps({"credential": credential, "reading": reading.to_dict()}) + b"\n")
        self.fh.flush()
        line = self.fh.readline()
        reply = json.loads(line) if line else {"error": "ConnectionClosed", "ok": False}
        if not reply.get("ok"):
            raise IngestRejected(f"{reading.device_id}: {reply.get('error')} {reply.get('message', '')}".strip())

    def close(self) -> None:
        self.fh.close()
        self.sock.close()


def run(profiles: list[DeviceProfile], duration_ticks: int, endpoint: str, log_path: Path,
        seed: str = "0", pace: float = 0.0, start_tick: int = 0) -> Path:
    """Feed the trust point and record every accepted reading in the ground-truth log."""
    creds = {p.device_id: p.credential for p in profiles}
    client = IngestClient(endpoint)
    log_path = Path(log_path)
    try:
        with log_path.open("wb") as log:
            last_ts = None
            for r in schedule(profiles, duration_ticks, seed, start_tick):
                if pace and last_ts is not None and r.timestamp != last_ts:
                    time.sleep(pace)
                last_ts = r.timestamp
                client.send(creds[r.device_id], r)
                log.write(canonical.dumps(r.to_dict()) + b"\n")
    finally:
        client.close()
    return log_path


def read_ground_truth(path: Path) -> list[SensorReading]:
    return [SensorReading.from_dict(json.loads(line)) for line in Path(path).read_bytes().splitlines()
            if line.strip()]


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="sensorcloud-sim", description="Simulate home sensors feeding a trust point.")
    p.add_argument("--profiles", required=True, help="JSON profile file")
    p.add_argument("--duration-ticks", type=int, required=True)
    p.add_argument("--seed", default="0")
    p.add_argument("--endpoint", required=True, help="trust-point ingest host:port")
    p.add_argument("--log", default="ground_truth.ndjson", help="ground-truth output path")
    p.add_argument("--pace", type=float, default=0.0, help="real seconds to sleep between ticks")
    args = p.parse_args(argv)
    try:
        path = run(load_profiles(Path(args.profiles)), args.duration_ticks, args.endpoint, Path(args.log),
                   args.seed, args.pace)
    except IngestRejected as exc:
        print(f"error: IngestRejected: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot reach trust point: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
