"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) so the CLI and the
HTTP gateway can render it as ``error: <code>: <message>``.
"""

from __future__ import annotations


class AdvocateError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


# identity
class InvalidSeed(AdvocateError, ValueError):
    pass


class InvalidConfig(AdvocateError, ValueError):
    pass


class AlreadyBootstrapped(AdvocateError):
    pass


class NotBootstrapped(AdvocateError):
    pass


class DuplicateKey(AdvocateError):
    pass


# cas
class StoreUnavailable(AdvocateError, OSError):
    pass


class NotFound(AdvocateError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class IntegrityViolation(AdvocateError):
    pass


# claims
class NonCanonicalNumber(AdvocateError, TypeError):
    pass


class NonCanonicalValue(AdvocateError, TypeError):
    pass


class MissingSelfRef(AdvocateError, ValueError):
    pass


class IdMismatch(AdvocateError, ValueError):
    pass


class MalformedClaim(AdvocateError, ValueError):
    pass


# anchor
class EmptyBatch(AdvocateError, ValueError):
    pass


class IndexOutOfRange(AdvocateError, IndexError):
    pass


class AlreadyIssued(AdvocateError):
    pass


class AnchorUnavailable(AdvocateError):
    pass


# collect
class DuplicateSource(AdvocateError):
    pass


class UnsupportedKind(AdvocateError, ValueError):
    pass


class InvalidSpec(AdvocateError, ValueError):
    pass


class SourceUnavailable(AdvocateError):
    pass


class UnknownSource(AdvocateError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class ModeMismatch(AdvocateError):
    pass


class MalformedManifest(AdvocateError, ValueError):
    pass


# aggregate
class PolicySyntaxError(AdvocateError, ValueError):
    """Raised by the policy parser; ``line`` and ``column`` are 1-based."""

    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column

    @property
    def code(self) -> str:
        return "SyntaxError"


class PolicyRejected(AdvocateError):
    pass


# gateway
class SyncFailed(AdvocateError):
    pass


class PeerIdentityChanged(AdvocateError):
    pass


class UnknownPeer(AdvocateError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)
