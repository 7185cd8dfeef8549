"""Exception types raised across preemptkit."""


class PreemptKitError(Exception):
    """Base class for all library errors."""


class ShapeError(PreemptKitError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(PreemptKitError, ValueError):
    """A configuration value violates its documented invariant."""


class FormatError(PreemptKitError, ValueError):
    """A file on disk is malformed (bad magic, truncated, checksum, ...)."""


class NonFiniteError(PreemptKitError, ArithmeticError):
    """A loss or gradient became NaN/inf."""


class FingerprintMismatch(PreemptKitError):
    """An artifact was produced under a different config than the one declared."""
