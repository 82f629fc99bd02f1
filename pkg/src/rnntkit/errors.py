"""Exception hierarchy shared by every module."""


class RnntkitError(Exception):
    pass


class InputError(RnntkitError, ValueError):
    """Malformed numeric input (non-finite logits, empty trellis, ...)."""


class PathError(RnntkitError, ValueError):
    pass


class RefusalError(RnntkitError):
    """Raised when a brute-force routine is asked to do too much work."""


class ConfigError(RnntkitError, ValueError):
    pass


class StateError(RnntkitError, ValueError):
    pass


class ModeError(RnntkitError, ValueError):
    pass


class VocabError(RnntkitError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DivergenceError(RnntkitError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LoadError(RnntkitError, IOError):
    pass


class ParseError(RnntkitError, ValueError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (token {position})"
        super().__init__(message)
        self.position = position


class SpecError(RnntkitError, ValueError):
    pass


class AnnotationError(RnntkitError, ValueError):
    pass


class GroupingError(RnntkitError, ValueError):
    pass


class ParameterError(RnntkitError, ValueError):
    pass


class UndefinedMetricError(RnntkitError, ArithmeticError):
    pass
