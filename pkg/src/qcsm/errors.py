"""Exception types shared across the package."""


class QcsmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(QcsmError):
    """A scenario configuration is malformed or violates an invariant."""


class ContractViolation(QcsmError):
    """An internal precondition or postcondition did not hold."""


class DecodeError(QcsmError):
    """A binary payload is not well-formed.

    Carries the byte offset at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedItem(QcsmError):
    """A payload item is well-formed but outside the supported subset."""


class DensityUndefined(QcsmError):
    """A per-class density has a zero denominator (no device is waiting)."""


class NotTrained(QcsmError):
    """A recommendation was requested before any policy was published."""
