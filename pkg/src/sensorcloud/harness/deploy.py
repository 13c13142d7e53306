"""Seeded multi-process deployment: cloud and trust-point daemons behind wire shims."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from cryptography.hazmat.primitives.asymmetric import ed25519, x25519

import sensorcloud
from sensorcloud import canonical, wire
from sensorcloud.cloud import _stream_file
from sensorcloud.errors import SensorCloudError
from sensorcloud.link import RemoteCloudLink
from sensorcloud.objsec import derive_stream_key
from sensorcloud.owner_cli import OwnerClient
from sensorcloud.service import ServiceClient, ServiceKeyRing
from sensorcloud.sim import SENTINEL_PREFIX, DeviceProfile
from sensorcloud.transport import Identity
from sensorcloud.harness.shim import FrameShim

START_TIMEOUT = 15.0


class EnvironmentFailure(SensorCloudError):
    """A daemon crashed or never came up."""


def seeded_bytes(seed: Any, label: str, n: int = 32) -> bytes:
    out = b""
    i = 0
    while len(out) < n:
        out += hashlib.sha256(f"{seed}|{label}|{i}".encode()).digest()
        i += 1
    return out[:n]


def _identity(seed: Any, role: str) -> Identity:
    return Identity(role, ed25519.Ed25519PrivateKey.from_private_bytes(seeded_bytes(seed, "sign:" + role)))


@dataclass
class Topology:
    owner: str
    devices: list[DeviceProfile]
    policies: dict[str, dict] = field(default_factory=dict)
    services: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict[str, Any], seed: Any) -> "Topology":
        devices = []
        for i, dev in enumerate(d["devices"]):
            dev = dict(dev)
            dev.setdefault("device_id", f"dev-{i}")
            dev.setdefault("seed", f"{seed}:{i}")
            dev["credential"] = seeded_bytes(seed, "cred:" + dev["device_id"]).hex()
            devices.append(DeviceProfile.from_dict(dev))
        return cls(d.get("owner", "alice"), devices, dict(d.get("policies", {})), list(d.get("services", [])))

    @property
    def streams(self) -> list[str]:
        return sorted({p.stream_id for p in self.devices})


class _Daemon:
    def __init__(self, name: str, argv: list[str], workdir: Path, port_file: Path):
        self.name = name
        self.argv = argv
        self.log_path = workdir / f"{name}.log"
        self.port_file = port_file
        self.proc: subprocess.Popen | None = None
        self.port: int | None = None

    def start(self) -> int:
        self.port_file.unlink(missing_ok=True)
        env = dict(os.environ)
        src = str(Path(sensorcloud.__file__).resolve().parent.parent)
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        with self.log_path.open("ab") as log:
            self.proc = subprocess.Popen([sys.executable, "-m", *self.argv], stdout=subprocess.DEVNULL,
                                         stderr=log, env=env)
        deadline = time.monotonic() + START_TIMEOUT
        while not self.port_file.exists():
            self.check()
            if time.monotonic() > deadline:
                self.stop()
                raise EnvironmentFailure(f"{self.name} did not start within {START_TIMEOUT}s")
            time.sleep(0.02)
        self.port = int(self.port_file.read_text())
        return self.port

    def check(self) -> None:
        if self.proc is not None and self.proc.poll() is not None:
            tail = self.log_path.read_text(errors="replace")[-2000:]
            raise EnvironmentFailure(f"{self.name} exited with {self.proc.returncode}: {tail}")

    def stop(self) -> None:
        if self.proc is None or self.proc.poll() is not None:
            return
        self.proc.send_signal(signal.SIGTERM)
        try:
            self.proc.wait(10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()

    def log_text(self) -> str:
        return self.log_path.read_text(errors="replace") if self.log_path.exists() else ""


class Deployment:
    """One owner's home, the cloud, and any number of service instances.

    Every key, credential and secret is derived from ``seed``.  Traffic between
    the trust point and the cloud passes ``tp_shim``; service traffic passes
    ``svc_shim``.  Both record every frame.
    """

    def __init__(self, topology: Topology, seed: Any = 0, workdir: Path | None = None):
        self.topology = topology
        self.seed = seed
        self._own_dir = workdir is None
        # short path: unix socket names are length-limited
        self.workdir = Path(workdir or tempfile.mkdtemp(prefix="sc-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.owner = topology.owner
        self.master_secret = seeded_bytes(seed, "master:" + self.owner)
        self.data_dir = self.workdir / "cloud-data"
        self.command_socket = str(self.workdir / "tp.sock")

        self.cloud_id = _identity(seed, "cloud")
        self.tp_id = _identity(seed, f"trust-point:{self.owner}")
        self.operator_id = _identity(seed, "cloud:operator")
        self.rings: dict[str, ServiceKeyRing] = {}
        for name in topology.services:
            role = f"service:{name}"
            ring = ServiceKeyRing(_identity(seed, role),
                                  x25519.X25519PrivateKey.from_private_bytes(seeded_bytes(seed, "inst:" + name)),
                                  path=self.workdir / f"svc-{name}.json")
            ring.transport.pin("cloud", self.cloud_id.public_bytes)
            self.cloud_id.pin(role, ring.transport.public_bytes)
            ring.save()
            self.rings[name] = ring
        for ident in (self.tp_id, self.operator_id):
            ident.pin("cloud", self.cloud_id.public_bytes)
            self.cloud_id.pin(ident.role, ident.public_bytes)

        self.cloud_config = self.workdir / "cloud.json"
        self.tp_config = self.workdir / "trustpoint.json"
        self.cloud: _Daemon | None = None
        self.tp: _Daemon | None = None
        self.tp_shim: FrameShim | None = None
        self.svc_shim: FrameShim | None = None
        self.ingest_endpoint = ""

    # --- configuration -------------------------------------------------------------

    def trust_point_config(self, cloud_endpoint: str) -> dict[str, Any]:
        streams: dict[str, set[str]] = {}
        creds = {}
        for p in self.topology.devices:
            streams.setdefault(p.device_id, set()).add(p.stream_id)
            creds[p.device_id] = p.credential
        return {
            "cloud_endpoint": cloud_endpoint,
            "command_socket": self.command_socket,
            "devices": [{"credential": creds[d], "device_id": d, "streams": sorted(s)}
                        for d, s in sorted(streams.items())],
            "flow_needles": [SENTINEL_PREFIX.encode().hex()],
            "identity": self.tp_id.to_dict(),
            "ingest_listen": "127.0.0.1:0",
            "master_secret": self.master_secret.hex(),
            "owner_id": self.owner,
            "policies": self.topology.policies,
            "state_dir": str(self.workdir / "tp-state"),
            "sync_interval": 0,
        }

    def _write(self, path: Path, obj: Any) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)

    # --- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self._write(self.cloud_config, {"data_dir": str(self.data_dir), "identity": self.cloud_id.to_dict(),
                                        "listen": "127.0.0.1:0", "test_mode": True})
        self.cloud = _Daemon("cloud", ["sensorcloud.cloud_server", "--config", str(self.cloud_config), "-v",
                                       "--port-file", str(self.workdir / "cloud.port")],
                             self.workdir, self.workdir / "cloud.port")
        port = self.cloud.start()
        self.tp_shim = FrameShim(("127.0.0.1", port))
        self.svc_shim = FrameShim(("127.0.0.1", port))
        self._write(self.tp_config, self.trust_point_config(self.tp_shim.endpoint))
        self.tp = _Daemon("trustpoint", ["sensorcloud.trustpoint_daemon", "--config", str(self.tp_config),
                                         "--port-file", str(self.workdir / "tp.port")],
                          self.workdir, self.workdir / "tp.port")
        self.ingest_endpoint = f"127.0.0.1:{self.tp.start()}"

    def restart_cloud(self, edit: Callable[[], None] | None = None) -> None:
        """Stop the cloud, run ``edit`` against its data files, start it again."""
        assert self.cloud and self.tp_shim and self.svc_shim
        self.cloud.stop()
        if edit is not None:
            edit()
        port = self.cloud.start()
        for shim in (self.tp_shim, self.svc_shim):
            shim.set_upstream(("127.0.0.1", port))

    def check_alive(self) -> None:
        for d in (self.cloud, self.tp):
            if d is not None:
                d.check()

    def stop(self) -> None:
        for d in (self.tp, self.cloud):
            if d is not None:
                d.stop()
        for s in (self.tp_shim, self.svc_shim):
            if s is not None:
                s.close()

    def cleanup(self) -> None:
        self.stop()
        if self._own_dir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> "Deployment":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.cleanup()

    # --- clients -------------------------------------------------------------------

    def tp_command(self, cmd: str, **args: Any) -> Any:
        self.check_alive()
        return OwnerClient(self.command_socket).request(cmd, **args)

    def owner_cli(self, *argv: str) -> subprocess.CompletedProcess:
        """Run the owner CLI as its own process, exactly as an owner would."""
        self.check_alive()
        env = dict(os.environ)
        env["PYTHONPATH"] = str(Path(sensorcloud.__file__).resolve().parent.parent)
        return subprocess.run([sys.executable, "-m", "sensorcloud.owner_cli", "--socket", self.command_socket,
                               "--json", *argv], capture_output=True, text=True, env=env, timeout=60)

    def service(self, name: str) -> ServiceClient:
        """A client for service ``name`` on a fresh session through the service shim."""
        assert self.svc_shim
        ring = self.rings[name]
        return ServiceClient(ring, RemoteCloudLink(ring.transport, self.svc_shim.endpoint))

    def operator_dump(self) -> dict[str, Any]:
        assert self.cloud and self.cloud.port
        link = RemoteCloudLink(self.operator_id, f"127.0.0.1:{self.cloud.port}")
        try:
            reply = link.call({"type": wire.DUMP_STATE}, wire.STATE)
        finally:
            link.close()
        return reply["snapshot"]

    # --- out-of-band views -----------------------------------------------------------

    def stream_file(self, stream: str) -> Path:
        return self.data_dir / "streams" / _stream_file(self.owner, stream)

    def stored_items(self, stream: str) -> list[bytes]:
        """Raw item lines as the cloud persisted them (the out-of-band ciphertext log)."""
        p = self.stream_file(stream)
        if not p.exists():
            return []
        return [line for line in p.read_bytes().splitlines() if line.strip()]

    def owner_keys(self, max_epoch: int) -> list[bytes]:
        return [derive_stream_key(self.master_secret, self.owner, s, e).key_bytes
                for s in self.topology.streams for e in range(max_epoch + 1)]

    def secrets(self, max_epoch: int) -> list[bytes]:
        """Every secret that must never reach the cloud: stream keys, master secret, private keys."""
        out = self.owner_keys(max_epoch) + [self.master_secret]
        out += [bytes.fromhex(p.credential) for p in self.topology.devices]
        out.append(self.tp_id.signing_key.private_bytes_raw())
        out += [r.instance_key.private_bytes_raw() for r in self.rings.values()]
        return out

    def wire_bytes(self) -> bytes:
        return b"".join(s.wire_bytes() for s in (self.tp_shim, self.svc_shim) if s is not None)


def dump_bytes(state: dict[str, Any]) -> bytes:
    return canonical.dumps(state)
