"""Request/response links from a Home-domain or service process to the cloud."""

from __future__ import annotations

import threading
from typing import Any, Protocol

from sensorcloud import canonical, wire
from sensorcloud.cloud import CloudPlatform, Principal
from sensorcloud.errors import TransportDown, TransportError, from_wire
from sensorcloud.transport import Identity, Session, connect, parse_endpoint


class CloudLink(Protocol):
    def call(self, msg: dict[str, Any], expect: str | None = None) -> dict[str, Any]: ...
    def close(self) -> None: ...


class LocalCloudLink:
    """In-process link for tests: same JSON round trip, no sockets."""

    def __init__(self, platform: CloudPlatform, role: str):
        self.platform = platform
        self.principal = Principal(role)
        self.up = True

    def call(self, msg: dict[str, Any], expect: str | None = None) -> dict[str, Any]:
        if not self.up:
            raise TransportDown("link is down")
        reply = self.platform.handle(self.principal, canonical.loads(canonical.dumps(msg)))
        reply = canonical.loads(canonical.dumps(reply))
        if reply["type"] == wire.ERROR:
            raise from_wire(reply["error"], reply["message"])
        if expect is not None and reply["type"] != expect:
            raise TransportDown(f"expected {expect}, got {reply['type']}")
        return reply

    def close(self) -> None:
        pass


class RemoteCloudLink:
    """Lazily (re)connecting link over the authenticated transport.

    Any transport failure drops the session and surfaces as TransportDown; the
    next call opens a fresh session.
    """

    def __init__(self, identity: Identity, endpoint: str, timeout: float = 30.0):
        self.identity = identity
        self.endpoint = endpoint
        self.timeout = timeout
        self._session: Session | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> Session:
        if self._session is None or self._session.closed:
            host, port = parse_endpoint(self.endpoint)
            self._session = connect(self.identity, host, port, "cloud", timeout=self.timeout)
        return self._session

    def call(self, msg: dict[str, Any], expect: str | None = None) -> dict[str, Any]:
        with self._lock:
            try:
                return wire.call(self._ensure(), msg, expect)
            except (TransportError, OSError) as exc:
                self._drop()
                raise TransportDown(f"cloud unreachable: {exc}") from exc

    def _drop(self) -> None:
        if self._session is not None:
            self._session.close()
            self._session = None

    def close(self) -> None:
        with self._lock:
            self._drop()
