"""Exception types shared across the package.

Errors that reflect bad input or a broken artifact lineage derive from
``ValidationError``; the CLI maps those to exit code 1 and everything else
to exit code 2.
"""


class ValidationError(Exception):
    """Base class for user-correctable problems."""


class ConfigurationError(ValidationError, ValueError):
    pass


class ShapeError(ValidationError, ValueError):
    pass


class DataError(ValidationError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class InsufficientDataError(ValidationError, ValueError):
    pass


class VocabularyError(ValidationError, KeyError):
    def __init__(self, label, valid):
        self.label = label
        self.valid = list(valid)
        super().__init__(f"unknown label {label!r}; valid labels: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]


class IntegrityError(ValidationError):
    """An artifact file is missing."""


class CorruptionError(ValidationError):
    """An artifact's recorded hash does not match its content."""


class LineageError(ValidationError):
    """Artifacts built from different upstream configurations were mixed."""

    def __init__(self, what, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"{what}: expected lineage {expected}, found {found}")


class PipelineIntegrityError(ValidationError):
    pass


class PairingError(ValidationError, ValueError):
    pass


class DegenerateLabelsError(ValidationError, ValueError):
    pass


class MissingArtifactError(ValidationError):
    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__(f"missing artifact {path}: run {stage} first")


class ReportError(ValidationError):
    """A report exists but holds nothing to summarise."""


class TrainingError(RuntimeError):
    def __init__(self, step, message="loss became NaN"):
        self.step = step
        super().__init__(f"{message} at step {step}")
