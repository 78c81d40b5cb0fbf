"""Exception hierarchy.

Every error carries a stable ``code`` used by the CLI to produce a single
machine-parsable line and a distinct exit status.
"""


class KPError(Exception):
    code = "KPError"
    exit_status = 1


class IoError(KPError):
    code = "IoError"
    exit_status = 2


class MalformedRow(KPError):
    code = "MalformedRow"
    exit_status = 3

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnknownCountry(KPError):
    code = "UnknownCountry"
    exit_status = 3


class PrevalenceOutOfRange(KPError):
    code = "PrevalenceOutOfRange"
    exit_status = 3


class DuplicateConflict(KPError):
    code = "DuplicateConflict"
    exit_status = 3


class IndexOutOfRange(KPError):
    code = "IndexOutOfRange"
    exit_status = 4


class NonPositiveDiagonal(KPError):
    code = "NonPositiveDiagonal"
    exit_status = 5


class NotPositiveDefinite(KPError):
    code = "NotPositiveDefinite"
    exit_status = 5


class SingularObservedBlock(KPError):
    code = "SingularObservedBlock"
    exit_status = 5


class AllProposalsInvalid(KPError):
    code = "AllProposalsInvalid"
    exit_status = 6


class InsufficientDraws(KPError):
    code = "InsufficientDraws"
    exit_status = 6


class MismatchedDrawCounts(KPError):
    code = "MismatchedDrawCounts"
    exit_status = 6


class TooFewObservations(KPError):
    code = "TooFewObservations"
    exit_status = 7


class FoldFailed(KPError):
    """A cross-validation fold failed; ``partial`` holds the folds finished so far."""

    code = "FoldFailed"
    exit_status = 7

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class MissingArtifact(KPError):
    code = "MissingArtifact"
    exit_status = 8


class ConfigError(KPError):
    code = "ConfigError"
    exit_status = 9


class NonConvergence(UserWarning):
    """Raised as a warning when any split R-hat exceeds the threshold."""
