"""Exception hierarchy.

Every engine error carries a stable ``code`` string. The CLI prints
``error: <code>: <message>`` and the HTTP service maps codes to status
codes, so codes are part of the public surface.
"""

from __future__ import annotations


class MicrodbError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def __str__(self) -> str:
        return f"{self.code}: {self.args[0]}"


# store / admin
class DuplicateName(MicrodbError):
    code = "duplicate-name"


class InvalidConfig(MicrodbError):
    code = "invalid-config"


class NotFound(MicrodbError):
    code = "not-found"


class SchemaViolation(MicrodbError):
    code = "schema-violation"


class RejectedByCallback(MicrodbError):
    code = "rejected-by-callback"

    def __init__(self, callback_id: str, reason: str = ""):
        super().__init__(f"callback {callback_id!r} rejected record: {reason}", callback_id=callback_id)
        self.callback_id = callback_id
        self.reason = reason


class ImmutableStore(MicrodbError):
    code = "immutable-store"


class KeyNotFound(MicrodbError):
    code = "key-not-found"


# security
class Unauthorized(MicrodbError):
    code = "unauthorized"


class UnauthorizedRange(Unauthorized):
    code = "unauthorized-range"


class BadSignature(MicrodbError):
    code = "bad-signature"


class Expired(MicrodbError):
    code = "expired"


class Malformed(MicrodbError):
    code = "malformed"


class UnknownRole(MicrodbError):
    code = "unknown-role"


class InvalidGrant(MicrodbError):
    code = "invalid-grant"


class NoKey(MicrodbError):
    code = "no-key"


class AuthFailure(MicrodbError):
    code = "auth-failure"


# information model
class Duplicate(MicrodbError):
    code = "duplicate"


class CyclicInheritance(MicrodbError):
    code = "cyclic-inheritance"


class UnknownParent(MicrodbError):
    code = "unknown-parent"


class UnknownSubject(MicrodbError):
    code = "unknown-subject"


class DuplicateTag(MicrodbError):
    code = "duplicate-tag"


class BadPath(MicrodbError):
    code = "bad-path"


class UnknownModel(MicrodbError):
    code = "unknown-model"


# eventbus
class UnknownSubscription(MicrodbError):
    code = "unknown-subscription"


class KeyMutation(MicrodbError):
    code = "key-mutation"


# ingest
class AlreadyBound(MicrodbError):
    code = "already-bound"


class UnknownStore(MicrodbError):
    code = "unknown-store"


class SourceUnreachable(MicrodbError):
    code = "source-unreachable"


# sync
class NonAdjacentTier(MicrodbError):
    code = "non-adjacent-tier"


class PolicyBlocked(MicrodbError):
    code = "policy-blocked"


class TransportDown(MicrodbError):
    code = "transport-down"


class DecodeError(MicrodbError):
    code = "decode-error"


# registry
class ValidationFailure(MicrodbError):
    code = "validation-failure"

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems), problems=problems)
        self.problems = list(problems)


class StaleVersion(MicrodbError):
    code = "stale-version"


class ApplyFailure(MicrodbError):
    code = "apply-failure"


# harness
class InvalidSpec(MicrodbError):
    code = "invalid-spec"

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems), problems=problems)
        self.problems = list(problems)


class ParseError(MicrodbError):
    code = "parse-error"


class ScenarioAssertionFailure(MicrodbError):
    code = "assertion-failure"

    def __init__(self, step_index: int, diff: str):
        super().__init__(f"step {step_index}: {diff}", step_index=step_index)
        self.step_index = step_index
        self.diff = diff


def _subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_subclasses(sub))
    return out


def from_code(code: str, message: str) -> MicrodbError:
    """Rebuild an error received over the wire from its code (unknown codes become MicrodbError)."""
    cls = next((c for c in _subclasses(MicrodbError) if c.code == code), MicrodbError)
    exc = cls.__new__(cls)
    MicrodbError.__init__(exc, message)
    if cls is MicrodbError:
        exc.code = code
    if cls in (ValidationFailure, InvalidSpec):
        exc.problems = message.split("; ")
    return exc
