"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument is malformed or has incompatible dimensions."""


class ContractViolation(ValueError):
    """Inputs satisfy the signature but break a documented precondition."""


class DegeneracyError(RuntimeError):
    """The problem is geometrically or numerically degenerate.

    ``diagnostics`` carries whatever the caller needs to report the failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class ParseError(ValueError):
    """A text file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}" if line is not None else f"{path}"
        elif line is not None:
            where = f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line
