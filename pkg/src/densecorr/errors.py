"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data problems exit 1, configuration
problems exit 2.
"""


class DenseCorrError(Exception):
    exit_code = 1


class DataError(DenseCorrError):
    """Input data is missing, malformed or violates a domain invariant."""

    exit_code = 1


class FormatError(DataError):
    """A binary file does not follow its declared format."""


class ConfigError(DenseCorrError):
    exit_code = 2


class DegenerateMotionError(DataError):
    """Rotation too small for the joint axis to be observable."""


class RankError(DataError):
    """Point configuration cannot constrain a rigid transform."""


class InvariantError(DenseCorrError):
    """An internal invariant that should hold by construction was violated."""


class TrainingError(DenseCorrError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
