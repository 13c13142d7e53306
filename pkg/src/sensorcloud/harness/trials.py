"""Seeded single-session attack trials against the transport layer."""

from __future__ import annotations

import random
import socket
import threading
from dataclasses import dataclass

from sensorcloud.errors import AuthFailure, FrameIntegrityError, ReplayDetected, SessionClosed
from sensorcloud.harness.shim import C2S, Attack, FrameShim
from sensorcloud.transport import Identity, handshake_initiator, handshake_responder

FRAMES_PER_TRIAL = 6

_EXPECTED = {
    "replay": (ReplayDetected,),
    "reorder": (ReplayDetected,),
    "drop": (ReplayDetected,),
    "modify": (ReplayDetected, FrameIntegrityError),
    "truncate": (SessionClosed,),
}


@dataclass
class TrialResult:
    kind: str
    seed: int
    direction: str
    frame: int
    error: str | None
    delivered: int
    failed_closed: bool


def pinned_pair(initiator_role: str = "trust-point:owner") -> tuple[Identity, Identity]:
    client = Identity.generate(initiator_role)
    server = Identity.generate("cloud")
    client.pin("cloud", server.public_bytes)
    server.pin(initiator_role, client.public_bytes)
    return client, server


def run_attack_trial(kind: str, seed: int, direction: str = C2S,
                     identities: tuple[Identity, Identity] | None = None,
                     timeout: float = 5.0) -> TrialResult:
    rng = random.Random(f"{kind}:{seed}:{direction}")
    bodies = [rng.randbytes(rng.randrange(1, 200)) for _ in range(FRAMES_PER_TRIAL)]
    # the attacked frame always has a successor, so drop/reorder are observable
    frame = rng.randrange(FRAMES_PER_TRIAL - 1)
    client_id, server_id = identities or pinned_pair()

    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    shim = FrameShim(listener.getsockname(), [Attack(kind, direction, frame, seed=seed)])

    received: list[bytes] = []
    outcome: dict[str, BaseException | None] = {"error": None}
    done = threading.Event()

    def reader(session):
        try:
            for _ in bodies:
                received.append(session.recv_frame())
        except BaseException as exc:  # recorded and classified below
            outcome["error"] = exc
            # a failed session must stay failed
            try:
                session.recv_frame()
                outcome["error"] = AssertionError("session kept working after failure")
            except SessionClosed:
                pass
        finally:
            done.set()

    def serve():
        conn, _ = listener.accept()
        conn.settimeout(timeout)
        try:
            s = handshake_responder(server_id, conn)
        except Exception as exc:
            outcome["error"] = exc
            done.set()
            return
        if direction == C2S:
            reader(s)
        else:
            _send_all(s, bodies)
            done.wait(timeout * 2)

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    try:
        sock = socket.create_connection(shim.address, timeout=timeout)
        client = handshake_initiator(client_id, sock, "cloud")
        if direction == C2S:
            _send_all(client, bodies)
            done.wait(timeout * 2)
        else:
            reader(client)
        client.close()
    finally:
        t.join(timeout * 2)
        shim.close()
        listener.close()

    err = outcome["error"]
    prefix_ok = received == bodies[: len(received)] and len(received) <= frame + 1
    is_timeout = isinstance(err, SessionClosed) and "timed out" in str(err)
    failed_closed = (
        isinstance(err, _EXPECTED[kind]) and not is_timeout and prefix_ok and bool(shim.fired)
    )
    return TrialResult(kind, seed, direction, frame, type(err).__name__ if err else None,
                       len(received), failed_closed)


def _send_all(session, bodies) -> None:
    try:
        for b in bodies:
            session.send_frame(b)
    except SessionClosed:
        pass  # the far side already failed closed


def unpinned_handshake_completes(case: str) -> bool:
    """True if a handshake with a mis-pinned party completes (it never should).

    case: 'responder-unpinned'  initiator has no pin for the responder
          'initiator-unpinned'  responder has no pin for the initiator
          'impostor'            responder presents a different key under the pinned role
    """
    client, server = pinned_pair()
    if case == "responder-unpinned":
        client.pins.clear()
    elif case == "initiator-unpinned":
        server.pins.clear()
    elif case == "impostor":
        server = Identity.generate("cloud")
        server.pin(client.role, client.public_bytes)
    else:
        raise ValueError(case)
    a, b = socket.socketpair()
    a.settimeout(5)
    b.settimeout(5)
    results = {}

    def respond():
        try:
            handshake_responder(server, b)
            results["responder"] = True
        except (AuthFailure, SessionClosed):
            results["responder"] = False

    t = threading.Thread(target=respond, daemon=True)
    t.start()
    try:
        handshake_initiator(client, a, "cloud")
        results["initiator"] = True
    except (AuthFailure, SessionClosed):
        results["initiator"] = False
    t.join(10)
    return results.get("initiator", False) or results.get("responder", False)
