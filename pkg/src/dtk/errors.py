"""Exception hierarchy shared across the package."""


class DTKError(Exception):
    """Base class for every error raised by dtk."""


class ShapeError(DTKError, ValueError):
    pass


class NumericError(DTKError, ArithmeticError):
    pass


class ContractError(DTKError, ValueError):
    """A precondition of an operation was violated by the caller."""


class FormatError(DTKError, ValueError):
    """A checkpoint or vocabulary file could not be decoded."""


class IngestionError(DTKError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecError(DTKError, ValueError):
    pass


class SubsetError(ContractError):
    def __init__(self, message: str, deficient: dict | None = None):
        self.deficient = deficient or {}
        super().__init__(message)


class TrainingDiverged(DTKError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
