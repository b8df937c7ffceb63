"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line layer can map it to
the documented process status without a lookup table of its own.
"""


class GliogradeError(Exception):
    exit_code = 1


class ConfigError(GliogradeError, ValueError):
    exit_code = 2


class ShapeError(GliogradeError, ValueError):
    exit_code = 3


class DomainError(GliogradeError, ValueError):
    exit_code = 3


class ContractError(GliogradeError, RuntimeError):
    """A caller broke an operation's precondition (e.g. backward on a non-scalar)."""

    exit_code = 3


class GraphError(GliogradeError, RuntimeError):
    exit_code = 3


class FormatError(GliogradeError, ValueError):
    exit_code = 3


class ValidationError(GliogradeError, ValueError):
    exit_code = 3


class DegenerateInputError(GliogradeError, ValueError):
    exit_code = 3


class NoTumourError(GliogradeError, ValueError):
    exit_code = 3

    def __init__(self, message="no tumour found"):
        super().__init__(message)


class CheckpointError(GliogradeError, ValueError):
    exit_code = 3


class NumericError(GliogradeError, FloatingPointError):
    exit_code = 4


class FileError(GliogradeError, OSError):
    exit_code = 5
