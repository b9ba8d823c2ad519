"""Exception hierarchy shared by every stage of the pipeline."""


class BranchPushError(Exception):
    """Base class for all library errors."""


class DegenerateDepth(BranchPushError):
    pass


class DimensionMismatch(BranchPushError):
    pass


class EmptyMask(BranchPushError):
    pass


class EmptyImage(BranchPushError):
    pass


class OutOfRoi(BranchPushError):
    pass


class InsufficientSupport(BranchPushError):
    pass


class FitDegenerate(BranchPushError):
    pass


class EmptyVisibleMask(BranchPushError):
    pass


class NoDepthAtCentroid(BranchPushError):
    pass


class DegenerateSegment(BranchPushError):
    pass


class NoCandidate(BranchPushError):
    pass


class PrimitiveBehindCamera(BranchPushError):
    pass


class UnknownBranch(BranchPushError):
    pass


class ConfigError(BranchPushError):
    pass


class StageError(BranchPushError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
