"""Exception types raised across the pipeline.

Every stage raises a named subclass of :class:`EhrError` so callers (and the
CLI) can distinguish usage problems from data problems without string
matching.
"""


class EhrError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EhrError):
    """A descriptor, config, or value failed structural validation."""


class IoError(EhrError):
    """A file was missing, unreadable, or could not be written."""


class JoinKeyError(EhrError):
    """A declared join column is absent from a table."""


class TimestampParseError(EhrError):
    """A non-empty timestamp cell did not match the declared format."""


class BudgetError(EhrError):
    """A single item exceeds the configured memory budget."""


class ManifestError(EhrError):
    """A cache manifest is missing, corrupt, or internally inconsistent."""


class TaskError(EhrError):
    """A task's apply function failed for a patient."""

    def __init__(self, patient_id: str, message: str):
        super().__init__(f"task failed for patient {patient_id!r}: {message}")
        self.patient_id = patient_id


class SchemaError(EhrError):
    """A raw sample does not cover the task's declared schema."""


class LabelError(EhrError):
    """A label value is outside the fitted label space or non-finite."""


class ShapeError(EhrError):
    """An array argument has the wrong shape or invalid entries."""


class DegenerateError(EhrError):
    """Numeric inputs contain non-finite values."""


class AlphaError(EhrError):
    """The calibration set is too small for the requested miscoverage."""


class CycleError(EhrError):
    """An ontology's parent links contain a cycle."""

    def __init__(self, code: str):
        super().__init__(f"parent chain of code {code!r} forms a cycle")
        self.code = code


class DanglingParentError(EhrError):
    """An ontology row names a parent code that does not exist."""


class DuplicateCodeError(EhrError):
    """An ontology file defines the same code twice."""


class UnknownCodeError(EhrError):
    """A queried code is not part of the ontology."""
