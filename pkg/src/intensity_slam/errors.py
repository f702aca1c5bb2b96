"""Exception types raised across the package."""


class SlamError(Exception):
    """Base class for all package errors."""


class InvalidInput(SlamError, ValueError):
    """A documented precondition was violated by the caller."""


class InvalidParam(InvalidInput):
    pass


class DegenerateConfiguration(SlamError):
    """Point set too degenerate (collinear/coincident) for rigid alignment."""


class FormatError(SlamError):
    pass


class ConfigError(SlamError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class NoReturn(SlamError):
    """Pixel has no valid LiDAR return behind it."""


class InsufficientMatches(SlamError):
    pass


class NoConvergence(SlamError):
    pass


class NoGround(SlamError):
    pass


class DegeneratePlane(SlamError):
    pass


class InsufficientCorpus(SlamError):
    pass


class DisconnectedGraph(SlamError):
    pass


class NotPositiveDefinite(SlamError):
    pass


class NoAssociations(SlamError):
    pass
