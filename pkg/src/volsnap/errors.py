"""Exception hierarchy shared by every volsnap module."""

from __future__ import annotations


class VolsnapError(Exception):
    """Base class for all errors raised by this package."""


class MalformedJson(VolsnapError):
    """Input text is not parseable JSON."""

    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: malformed JSON ({detail})")


class SchemaError(VolsnapError):
    """JSON parsed, but a record violates the expected plugin schema."""

    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: {detail}")


class InvalidConfig(VolsnapError, ValueError):
    pass


class LabelCollision(VolsnapError, ValueError):
    pass


class TooFewSnapshots(VolsnapError, ValueError):
    pass


class InvalidIp(VolsnapError, ValueError):
    pass


class FixtureMissing(VolsnapError, LookupError):
    pass


class RateLimited(VolsnapError):
    """A provider refused the request; ``retry_after`` is in seconds when known."""

    def __init__(self, provider: str, retry_after: float | None = None):
        self.provider = provider
        self.retry_after = retry_after
        hint = f", retry after {retry_after:g}s" if retry_after is not None else ""
        super().__init__(f"{provider}: rate limited{hint}")


class EmptyInput(VolsnapError, ValueError):
    pass


class NoTimestampedProcesses(VolsnapError, ValueError):
    pass
