"""Exception types shared across modules."""


class RegimenRLError(Exception):
    """Base class for package errors."""


class ConfigError(RegimenRLError, ValueError):
    pass


class CohortParseError(RegimenRLError, ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class CohortValidationError(RegimenRLError, ValueError):
    def __init__(self, patient_id: str, message: str):
        self.patient_id = patient_id
        super().__init__(f"patient {patient_id}: {message}")


class EmptyDatasetError(RegimenRLError, ValueError):
    pass


class RiskDomainError(RegimenRLError, ValueError):
    pass


class NotFittedError(RegimenRLError, RuntimeError):
    pass


class ShapeError(RegimenRLError, ValueError):
    pass


class DivergenceError(RegimenRLError, FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")


class ModelFileError(RegimenRLError, ValueError):
    """Base class for model file load failures."""


class ModelFormatError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelTruncatedError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass


class VocabularyMismatchError(RegimenRLError, ValueError):
    pass


class DegenerateDataError(RegimenRLError, ValueError):
    pass


class UnsupportedActionError(RegimenRLError, LookupError):
    def __init__(self, action_id: int):
        self.action_id = action_id
        super().__init__(f"no logged encounter with action {action_id}")
