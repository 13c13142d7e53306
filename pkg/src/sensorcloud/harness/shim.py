"""Frame-aware TCP proxy that records and optionally attacks traffic between two daemons.

The shim understands only the 4-byte length prefix, never the contents, so it
behaves like any on-path attacker.  Handshake frames (two client->server, one
server->client) pass untouched; ``Attack.frame`` counts application frames.
"""

from __future__ import annotations

import random
import socket
import struct
import threading
from dataclasses import dataclass, field

C2S = "c2s"
S2C = "s2c"
_HANDSHAKE_FRAMES = {C2S: 2, S2C: 1}

ATTACKS = ("replay", "reorder", "truncate", "modify", "drop")


@dataclass
class Attack:
    """``connection=None`` targets the ``frame``-th application frame seen on any
    connection after the attack is armed."""

    kind: str
    direction: str = C2S
    frame: int = 0
    connection: int | None = 0
    seed: int = 0
    _target: int = field(default=-1, repr=False)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}")


@dataclass
class _Conn:
    index: int
    client: socket.socket
    upstream: socket.socket
    held: dict[str, bytes] = field(default_factory=dict)


class FrameShim:
    def __init__(self, upstream: tuple[str, int], attacks: list[Attack] | None = None,
                 host: str = "127.0.0.1"):
        self.upstream = upstream
        self.attacks = list(attacks or [])
        self.captured = {C2S: bytearray(), S2C: bytearray()}
        self.fired: list[Attack] = []
        self._lock = threading.Lock()
        self._conns: list[_Conn] = []
        self._seen = {C2S: 0, S2C: 0}
        for a in self.attacks:
            self._arm(a)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, 0))
        self._listener.listen(16)
        self.address = self._listener.getsockname()
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def _arm(self, attack: Attack) -> None:
        if attack.connection is None:
            attack._target = self._seen[attack.direction] + attack.frame

    def add_attack(self, attack: Attack) -> None:
        with self._lock:
            self._arm(attack)
            self.attacks.append(attack)

    def set_upstream(self, upstream: tuple[str, int]) -> None:
        """New connections go to ``upstream`` (e.g. after the server restarts)."""
        self.upstream = upstream

    def wire_bytes(self) -> bytes:
        with self._lock:
            return bytes(self.captured[C2S]) + bytes(self.captured[S2C])

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                client, _ = self._listener.accept()
            except OSError:
                return
            try:
                up = socket.create_connection(self.upstream, timeout=10)
                up.settimeout(None)
            except OSError:
                client.close()
                continue
            for s in (client, up):
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                conn = _Conn(len(self._conns), client, up)
                self._conns.append(conn)
            threading.Thread(target=self._pump, args=(conn, C2S), daemon=True).start()
            threading.Thread(target=self._pump, args=(conn, S2C), daemon=True).start()

    def _take_attack(self, conn: _Conn, direction: str, app_index: int) -> Attack | None:
        with self._lock:
            global_index = self._seen[direction]
            self._seen[direction] += 1
            for a in self.attacks:
                if a.direction != direction:
                    continue
                if (a.connection is None and a._target == global_index) or (
                        a.connection == conn.index and a.frame == app_index):
                    self.attacks.remove(a)
                    self.fired.append(a)
                    return a
        return None

    def _pump(self, conn: _Conn, direction: str) -> None:
        src, dst = (conn.client, conn.upstream) if direction == C2S else (conn.upstream, conn.client)
        n = 0
        try:
            while True:
                frame = _read_raw_frame(src)
                if frame is None:
                    break
                with self._lock:
                    self.captured[direction].extend(frame)
                app_index = n - _HANDSHAKE_FRAMES[direction]
                n += 1
                if direction in conn.held:
                    dst.sendall(frame + conn.held.pop(direction))
                    continue
                attack = self._take_attack(conn, direction, app_index) if app_index >= 0 else None
                if attack is None:
                    dst.sendall(frame)
                elif attack.kind == "replay":
                    dst.sendall(frame + frame)
                elif attack.kind == "reorder":
                    conn.held[direction] = frame
                elif attack.kind == "drop":
                    pass
                elif attack.kind == "modify":
                    rng = random.Random(attack.seed)
                    body = bytearray(frame)
                    pos = rng.randrange(4, len(body))
                    body[pos] ^= 1 << rng.randrange(8)
                    dst.sendall(bytes(body))
                elif attack.kind == "truncate":
                    rng = random.Random(attack.seed)
                    dst.sendall(frame[: rng.randrange(1, len(frame))])
                    break
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def close(self) -> None:
        self._stopped.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            for s in (c.client, c.upstream):
                try:
                    s.close()
                except OSError:
                    pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_raw_frame(sock: socket.socket) -> bytes | None:
    head = _recv_n(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    body = _recv_n(sock, length)
    if body is None:
        return None
    return head + body


def _recv_n(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)
