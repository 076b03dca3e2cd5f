"""Exception hierarchy shared across the package."""


class NetmigError(Exception):
    """Base class for all package errors."""


class ValidationError(NetmigError, ValueError):
    """Input data or arguments violate a documented contract."""


class SchemaError(ValidationError):
    """A table does not match its file schema.

    Carries the 1-based data row number (header excluded) and offending value
    when the problem is local to a row.
    """

    def __init__(self, message, path=None, row=None, value=None):
        self.path = path
        self.row = row
        self.value = value
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class CollinearityError(NetmigError, ValueError):
    """Design matrix is rank deficient."""

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(message)


class SeparationError(NetmigError, ValueError):
    """A coefficient diverges because the data perfectly predict choices."""

    def __init__(self, message, names=()):
        self.names = tuple(names)
        super().__init__(message)


class ConvergenceError(NetmigError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class EstimationError(ConvergenceError):
    """Likelihood maximisation failed to converge."""


class EquilibriumError(ConvergenceError):
    """The spatial equilibrium fixed point was not reached."""
