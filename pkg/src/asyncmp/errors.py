"""Exception hierarchy shared by every module."""


class AmpError(Exception):
    """Base class for all errors raised by asyncmp."""


class InvalidArgument(AmpError, ValueError):
    pass


class ContractViolation(AmpError):
    """Shapes or widths do not line up."""


class ProtocolViolation(AmpError):
    """A transition function received an input no row handles."""


class ProtocolFailure(AmpError):
    """A protocol run did not reach quiescence within its safety cap."""


class NumericFailure(AmpError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class OutOfDomain(AmpError, ValueError):
    pass


class ParseError(AmpError, ValueError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line
