"""Exception hierarchy shared by every coirl module."""


class COIRLError(Exception):
    """Base class for all library errors."""


class InvalidArgument(COIRLError, ValueError):
    """Shapes or parameter values do not fit together."""


class InvalidContext(InvalidArgument):
    """A context vector is not a point of the probability simplex."""


class NonConvergence(COIRLError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DegenerateStep(COIRLError, ArithmeticError):
    """A descent step produced a point that cannot be projected."""


class DegenerateCut(COIRLError, ArithmeticError):
    """A cutting plane is zero or not positive under the ellipsoid metric."""


class NumericalFailure(COIRLError, ArithmeticError):
    """An ellipsoid lost positive-definiteness or a solve returned garbage."""


class UnsupportedDynamics(COIRLError):
    """GPI was asked to transfer across context-dependent dynamics."""


class InvalidState(COIRLError):
    """An object is in a state where the operation is undefined."""


class SchemaError(COIRLError, ValueError):
    """A serialized document or CSV does not match its schema."""
