"""Exception and warning types shared across the package."""


class OstarError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSpecError(OstarError):
    """An architecture or data specification is degenerate (bad dims, gain 0, non-PD covariance)."""


class ShapeError(OstarError):
    """Array shapes do not compose (layer dims, batch dims, gradient shapes)."""


class InvalidLabelError(OstarError):
    """A label lies outside [0, n_classes)."""


class InvalidWeightError(OstarError):
    """A per-sample weight is negative."""


class InvalidInputError(OstarError):
    """An operand is empty or otherwise unusable (empty cloud, non-square cost matrix)."""


class InvalidBatchError(OstarError):
    """A batch is unusable for the requested loss (e.g. every class group empty)."""


class InvalidProportionsError(OstarError):
    """A proportion vector is off the simplex or has a zero entry where positivity is required."""


class DatasetError(OstarError):
    """A dataset violates a precondition (missing class, bad label range)."""


class InfeasibleSchemeError(OstarError):
    """An imbalance scheme cannot be realised on the given dataset."""


class CsvFormatError(OstarError):
    """A feature CSV is malformed; the message names the offending line."""


class OracleUnavailableError(OstarError):
    """An evaluation step needs oracle target labels that are absent."""


class CheckpointVersionError(OstarError):
    """A checkpoint file carries an unknown version field."""


class ConfigError(OstarError):
    """A run configuration fails schema validation; the message carries a JSON pointer."""


class DegenerateConfusionWarning(UserWarning):
    """Emitted when a confusion matrix is built from a sample missing some class."""


class IllConditionedWarning(UserWarning):
    """Emitted when the proportion solver sees a numerically rank-deficient confusion matrix."""
