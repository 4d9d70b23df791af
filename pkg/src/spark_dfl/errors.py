"""Exception types shared across the simulator."""


class SparkError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SparkError, ValueError):
    pass


class ContractViolation(SparkError, ValueError):
    """An operation was called with inputs outside its precondition."""


class ProtocolError(SparkError):
    """Peers disagree on sketch width or layer table."""


class ResourceError(SparkError, MemoryError):
    pass


class ParseError(SparkError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(SparkError):
    pass
