"""Exception hierarchy; the CLI maps these onto exit codes."""


class AprLabError(Exception):
    exit_code = 1


class DataError(AprLabError, ValueError):
    """Unreadable, malformed, or inconsistent input data."""

    exit_code = 2


class ModelFileError(DataError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelDimensionError(ModelFileError):
    pass


class NumericalError(AprLabError, FloatingPointError):
    """A training step produced a non-finite parameter."""

    exit_code = 3
