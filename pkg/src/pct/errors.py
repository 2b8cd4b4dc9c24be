"""Exception types shared across the package."""


class PctError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PctError):
    """Tensor dimensions do not line up; the message names both shapes."""


class ConfigError(PctError):
    """A configuration value is out of its legal range or inconsistent."""


class ContractError(PctError):
    """A call-time precondition was violated (e.g. non-scalar loss)."""


class NumericError(PctError):
    """Numerically invalid input: NaN, zero-norm vector, diverged loss."""


class SingularError(NumericError):
    """A linear system is rank deficient or too ill-conditioned to solve."""


class ProtocolError(PctError):
    """An evaluation protocol precondition is unsatisfiable on this data."""
