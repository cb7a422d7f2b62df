"""Exception hierarchy shared by every module of the package."""


class DecondError(Exception):
    """Base class for all package errors."""


class FactorizationFailed(DecondError):
    pass


class NotSymmetric(DecondError):
    pass


class DimensionMismatch(DecondError, ValueError):
    pass


class NonPositiveHyperparameter(DecondError, ValueError):
    pass


class DegenerateInput(DecondError, ValueError):
    pass


class UnsupportedFamily(DecondError, ValueError):
    pass


class AllBagsEmpty(DecondError):
    pass


class TooFewBags(DecondError, ValueError):
    pass


class ParseError(DecondError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DecondError):
    def __init__(self, message: str, missing: list[str] | None = None):
        self.missing = list(missing or [])
        if self.missing:
            message = f"{message} (missing columns: {', '.join(self.missing)})"
        super().__init__(message)


class EmptyDataset(DecondError):
    pass


class NonPositiveLambda(DecondError, ValueError):
    pass


class NegativeNoise(DecondError, ValueError):
    pass


class DegenerateNoise(DecondError, ValueError):
    pass


class NonFiniteObjective(DecondError):
    pass


class TooManyInducing(DecondError, ValueError):
    pass


class UnmatchedData(DecondError, ValueError):
    pass


class ZeroVariance(DecondError, ValueError):
    pass


class GridTooSmall(DecondError, ValueError):
    pass


class ConfigError(DecondError, ValueError):
    pass
