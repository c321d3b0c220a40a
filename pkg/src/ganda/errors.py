"""Exception hierarchy shared by every stage of the pipeline."""


class GandaError(Exception):
    """Base class for all package errors."""


class UserError(GandaError):
    """Bad input supplied by the caller (paths, configs, shapes)."""


class RuntimeFailure(GandaError):
    """Failure that happens while a valid job is running."""


class MissingFile(UserError, FileNotFoundError):
    pass


class PlaneCountMismatch(UserError):
    pass


class DuplicateRole(UserError):
    pass


class UnsupportedBitDepth(UserError):
    pass


class IoFailure(RuntimeFailure, OSError):
    pass


class MissingChannel(UserError):
    pass


class ChannelSpecMismatch(UserError):
    pass


class MissingPatch(UserError):
    pass


class ShapeMismatch(UserError, ValueError):
    pass


class InvalidSpec(UserError, ValueError):
    pass


class InvalidParams(UserError, ValueError):
    pass


class InvalidConfig(UserError, ValueError):
    pass


class CorruptCheckpoint(UserError):
    pass


class EmptyDataset(UserError):
    pass


class NonFiniteLoss(RuntimeFailure, ArithmeticError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class EmptyRegion(UserError, ValueError):
    pass


class EmptyMask(UserError, ValueError):
    pass


class DegenerateInput(UserError, ValueError):
    pass
