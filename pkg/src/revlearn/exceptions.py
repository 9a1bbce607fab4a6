"""Exception hierarchy.

Configuration-type errors map to CLI exit status 2, protocol-type errors to
exit status 1.
"""


class RevlearnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RevlearnError, ValueError):
    """Invalid model config, experiment spec or CLI usage."""


class CompatibilityError(RevlearnError, ValueError):
    """Behavioral module shapes do not match the core it is applied to."""


class LifecycleError(RevlearnError, RuntimeError):
    """Operation not allowed in the module's current lifecycle state."""


class NumericalDivergenceError(RevlearnError, FloatingPointError):
    """Training produced a non-finite loss."""


class ProtocolError(RevlearnError, RuntimeError):
    """Measurement protocol violated (mismatched prompt sets, mutated core, ...)."""
