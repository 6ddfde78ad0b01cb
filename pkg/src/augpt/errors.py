"""Exception types shared across the pipeline.

The CLI maps these onto exit codes, so every failure a user can trigger
should surface as one of them.
"""


class AugPTError(Exception):
    """Base class for all library errors."""


class ParameterError(AugPTError, ValueError):
    """A configuration value or argument is out of its allowed domain."""


class RangeError(ParameterError):
    """An amplitude or strength lies outside its policy range."""


class UnknownPolicyError(ParameterError, KeyError):
    pass


class DataError(AugPTError, ValueError):
    """Input data is missing, empty, or inconsistent with a schema."""


class SchemaError(DataError):
    pass


class AlignmentError(DataError):
    """Two sequences that must correspond one-to-one do not."""


class DegenerateFeatureError(AugPTError, ArithmeticError):
    """A feature vector has zero norm, so cosine similarity is undefined."""


class NumericalFailure(AugPTError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
