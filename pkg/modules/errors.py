# modules/errors.py
"""Exception hierarchy shared by the pipeline modules.

Every error carries the process exit code the CLI reports for it.
"""


class FactoryError(Exception):
    exit_code = 1


class ValidationError(FactoryError, ValueError):
    exit_code = 1


class DomainError(ValidationError):
    """A physical parameter lies outside its valid range."""


class ConfigurationError(ValidationError):
    pass


class ProjectionError(ValidationError):
    """A point lies at or behind the camera plane."""


class ConsistencyError(ValidationError):
    pass


class PairingError(ValidationError):
    def __init__(self, message, orphan_images=(), orphan_annotations=()):
        super().__init__(message)
        self.orphan_images = list(orphan_images)
        self.orphan_annotations = list(orphan_annotations)


class NumericError(ValidationError):
    pass


class FeatureFormatError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class StorageError(FactoryError, OSError):
    exit_code = 2


class RemoteServiceError(FactoryError):
    exit_code = 3
