"""Exception types raised across the package."""


class OrsiflowError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(OrsiflowError, ValueError):
    pass


class IndivisibleSplit(ShapeMismatch):
    pass


class NotScalar(OrsiflowError, ValueError):
    pass


class DetachedGraph(OrsiflowError, RuntimeError):
    """backward() called on a tensor that is not connected to any parameter."""


class MissingGrad(OrsiflowError, RuntimeError):
    pass


class OutOfRange(OrsiflowError, ValueError):
    pass


class NonFiniteState(OrsiflowError, FloatingPointError):
    pass


class NonFiniteLoss(NonFiniteState):
    pass


class DegenerateTrajectory(OrsiflowError, ValueError):
    pass


class InvalidSpec(OrsiflowError, ValueError):
    pass


class UnreadableImage(OrsiflowError, IOError):
    pass


class MissingPair(OrsiflowError, FileNotFoundError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("unpaired files: " + ", ".join(self.missing))


class EmptyGroundTruth(OrsiflowError, ValueError):
    pass


class CheckpointError(OrsiflowError, IOError):
    pass


class MissingCheckpoint(CheckpointError, FileNotFoundError):
    pass


class MissingVae(MissingCheckpoint):
    pass
