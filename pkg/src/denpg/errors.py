"""Exception hierarchy shared by all denpg modules."""


class DenpgError(Exception):
    """Base class for every error raised by denpg."""


class InvalidTopology(DenpgError):
    pass


class DisconnectedGraph(DenpgError):
    pass


class NotDoublyStochastic(DenpgError):
    pass


class DimensionMismatch(DenpgError):
    pass


class TooLarge(DenpgError):
    """Raised when exact enumeration would exceed its size guard."""


class SolveFailure(DenpgError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class SpaceMismatch(DenpgError):
    pass


class ConfigError(DenpgError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, key=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key


class ValidationError(ConfigError):
    pass
