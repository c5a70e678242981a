"""Exception types shared across the package."""


class FewsegError(Exception):
    """Base class for all library errors."""


class ValidationError(FewsegError, ValueError):
    """An input violates a documented precondition."""


class ShapeError(ValidationError):
    """Tensor dimensions are inconsistent with the operation's contract."""


class ContractError(FewsegError):
    """An operation was invoked outside its supported domain."""


class DegenerateMaskError(ValidationError):
    """A mask lost all foreground pixels after downsampling."""


class SamplingError(FewsegError):
    """An episode cannot be drawn from the available records."""


class TrainingDivergedError(FewsegError):
    """The training loss became non-finite."""
