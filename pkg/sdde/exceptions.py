class SDDEError(Exception):
    """Base class for every error raised by the toolkit."""


class ModelSpecError(SDDEError, ValueError):
    pass


class DataError(SDDEError, ValueError):
    pass


class NonStationaryModelError(SDDEError):
    def __init__(self, message: str, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class NumericalError(SDDEError):
    """Base class for numerical failures (CLI exit status 2)."""


class QuadratureBudgetError(NumericalError):
    pass


class IllConditionedLadderError(NumericalError):
    def __init__(self, message: str, level: int):
        super().__init__(message)
        self.level = level


class SingularSystemError(NumericalError):
    pass


class InsufficientGridError(NumericalError):
    pass


class NonIdentifiableError(NumericalError):
    pass


class SimulationDivergedError(NumericalError):
    pass
