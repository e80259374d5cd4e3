"""Exception taxonomy shared by all modules.

Every contract violation maps to one of these types so callers (and the
CLI exit-code logic) can tell configuration mistakes from data problems
from outright bugs.
"""


class DtpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DtpError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ContractError(DtpError):
    """An argument violates a documented precondition (non-shape)."""


class StateError(DtpError):
    """An object was used in an invalid lifecycle state (e.g. frozen tape)."""


class LabelError(DtpError):
    """A label value is outside [0, K) and is not the ignore index."""


class ConfigError(DtpError):
    """A configuration key or value is invalid."""


class DataError(DtpError):
    """On-disk data is missing, malformed, or inconsistent."""


class CompatibilityError(DtpError):
    """A persisted artifact has an incompatible format version."""
