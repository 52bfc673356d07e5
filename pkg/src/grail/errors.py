"""Exception hierarchy shared by every module."""


class GrailError(Exception):
    pass


class ShapeError(GrailError, ValueError):
    pass


class NonScalarLoss(GrailError, ValueError):
    pass


class PositionedSyntaxError(GrailError, SyntaxError):
    """Syntax error carrying a 1-based line/column and the token that was expected."""

    def __init__(self, message, line, column, expected=None):
        self.line = line
        self.column = column
        self.expected = expected
        detail = f"{message} at line {line}, column {column}"
        if expected:
            detail += f" (expected {expected})"
        super().__init__(detail)
        self.lineno = line
        self.offset = column


class ProgramSyntaxError(PositionedSyntaxError):
    pass


class ProxySyntaxError(PositionedSyntaxError):
    pass


class ValidationError(GrailError, ValueError):
    def __init__(self, message, clause=None):
        self.clause = clause
        super().__init__(f"{message}: {clause}" if clause is not None else message)


class UnknownFunction(GrailError, ValueError):
    pass


class UnknownVariable(GrailError, ValueError):
    pass


class MissingProxy(GrailError, KeyError):
    pass


class MissingValuation(GrailError, KeyError):
    pass


class MissingStatusFn(GrailError, KeyError):
    pass


class MissingAtom(GrailError, KeyError):
    pass


class NonfiniteInput(GrailError, ValueError):
    pass


class EnvError(GrailError, RuntimeError):
    pass


class ConfigError(GrailError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CheckpointError(GrailError, ValueError):
    pass


class TrainingError(GrailError, RuntimeError):
    pass
