"""Exception hierarchy shared by every module.

Each error class carries the CLI exit code it maps to.
"""


class GfslError(Exception):
    exit_code = 1


class ConfigError(GfslError):
    exit_code = 2


class DataError(GfslError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(DataError):
    def __init__(self, rule, message):
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


class CapacityError(DataError):
    pass


class NumericError(GfslError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    pass


class DegenerateNormError(NumericError, ValueError):
    pass


class EmptyDictionaryError(NumericError, ValueError):
    pass
