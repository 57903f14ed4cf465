"""Exception hierarchy. Every error carries a short machine-readable category."""


class GeoleakError(Exception):
    category = "error"


class InvalidInputError(GeoleakError, ValueError):
    category = "invalid-input"


class InvalidParameterError(GeoleakError, ValueError):
    category = "invalid-parameter"


class InvalidDataError(GeoleakError, ValueError):
    category = "invalid-data"


class EmptyTrainingSetError(GeoleakError, ValueError):
    category = "empty-training-set"


class InsufficientDataError(GeoleakError, ValueError):
    category = "insufficient-data"


class EmptyReportError(GeoleakError, ValueError):
    category = "empty-report"


class IngestionError(GeoleakError):
    category = "ingestion"


class ConfigMismatchError(GeoleakError):
    category = "config-mismatch"


class NumericError(GeoleakError, ArithmeticError):
    category = "numeric"
