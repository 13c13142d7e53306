"""Exception hierarchy shared by every daemon and library in the package.

Errors that cross the wire are rendered as ``{"error": <class name>, "message": ...}``
and rebuilt on the other side with :func:`from_wire`, so the class names below
are part of the protocol.
"""

from __future__ import annotations


class SensorCloudError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# domain model
class InvalidReading(SensorCloudError):
    pass


class InvalidPolicy(SensorCloudError):
    pass


class FlowViolation(SensorCloudError):
    """Plaintext sensor data attempted to leave its trust domain."""


# object security
class VerificationError(SensorCloudError):
    """Base for every reason a protected item is rejected by a verifier."""


class IntegrityFailure(VerificationError):
    pass


class ChainBreak(VerificationError):
    def __init__(self, message: str, position: int | None = None, seq: int | None = None):
        super().__init__(message)
        self.position = position
        self.seq = seq


class WrongKey(VerificationError):
    pass


class MalformedItem(VerificationError):
    pass


class SequenceViolation(SensorCloudError):
    pass


class MalformedKey(SensorCloudError):
    pass


class UnwrapError(SensorCloudError):
    pass


class UnknownStream(SensorCloudError):
    pass


# trust point
class UnauthorizedDevice(SensorCloudError):
    pass


class UnknownService(SensorCloudError):
    pass


class UnknownGrant(SensorCloudError):
    pass


class NotPending(SensorCloudError):
    pass


class NotApproved(SensorCloudError):
    pass


class MissingGranteeKey(SensorCloudError):
    pass


class TransportDown(SensorCloudError):
    def __init__(self, message: str, uploaded: int = 0):
        super().__init__(message)
        self.uploaded = uploaded


# cloud
class NotTrustPointSession(SensorCloudError):
    pass


class AccessDenied(SensorCloudError):
    pass


class UnknownAddressee(SensorCloudError):
    pass


class DisabledInProduction(SensorCloudError):
    pass


class BadRequest(SensorCloudError):
    pass


# transport
class TransportError(SensorCloudError):
    pass


class AuthFailure(TransportError):
    pass


class Downgrade(TransportError):
    pass


class SessionClosed(TransportError):
    pass


class ReplayDetected(SessionClosed):
    """Frame counter did not match the expected next value (replay, reorder or drop)."""


class FrameIntegrityError(SessionClosed):
    pass


# service runtime
class NotRegistered(SensorCloudError):
    pass


class MissingKey(SensorCloudError):
    pass


# owner cli
class SocketUnavailable(SensorCloudError):
    pass


class CommandRejected(SensorCloudError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.remote_code = code


# sensor sim / harness
class IngestRejected(SensorCloudError):
    pass


class EnvironmentFailure(SensorCloudError):
    pass


def _all_subclasses(cls: type) -> dict[str, type]:
    out = {}
    for sub in cls.__subclasses__():
        out[sub.__name__] = sub
        out.update(_all_subclasses(sub))
    return out


def from_wire(code: str, message: str) -> SensorCloudError:
    """Rebuild a typed error from its wire form; unknown codes become ``SensorCloudError``."""
    cls = _all_subclasses(SensorCloudError).get(code)
    if cls is None:
        return SensorCloudError(f"{code}: {message}")
    if cls is CommandRejected:
        return CommandRejected(code, message)
    try:
        return cls(message)
    except TypeError:
        return SensorCloudError(f"{code}: {message}")
