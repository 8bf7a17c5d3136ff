"""Exception hierarchy shared by every module."""


class MixError(Exception):
    """Base class for all errors raised by mixalign."""


class InvalidArg(MixError, ValueError):
    pass


class DegenerateShape(MixError, ValueError):
    """Landmarks are (numerically) collinear or collapsed to a point."""


class SingularTransform(MixError, ValueError):
    pass


class SingularSystem(MixError, ArithmeticError):
    pass


class LengthMismatch(MixError, ValueError):
    pass


class InsufficientData(MixError, ValueError):
    pass


class ParseError(MixError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MismatchedCount(ParseError):
    pass


class UnsupportedFormat(MixError, ValueError):
    pass


class VersionMismatch(MixError, ValueError):
    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"model file version {found} is not supported (expected version {supported})")


class CorruptModel(MixError, ValueError):
    pass
