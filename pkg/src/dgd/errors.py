"""Exception hierarchy shared by every module."""


class DGDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DGDError, ValueError):
    pass


class NumericDomainError(DGDError, ValueError):
    pass


class ContractError(DGDError, ValueError):
    """A caller broke an operation's precondition."""


class TrainingDivergedError(DGDError, RuntimeError):
    def __init__(self, message, group=None, epoch=None, batch=None):
        super().__init__(message)
        self.group = group
        self.epoch = epoch
        self.batch = batch


class DataError(DGDError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(DGDError, ValueError):
    pass


class ProfileMismatchError(CheckpointError):
    pass
