"""Exception types shared by the solvers, generators and CLI."""


class PnPError(Exception):
    """Base class for every error raised by this package."""


class DegenerateDepth(PnPError):
    """A point lies on the camera plane, so its projection is undefined."""

    def __init__(self, index, depth):
        super().__init__(f"correspondence {index} has camera depth {depth:.3g}")
        self.index = index
        self.depth = depth


class NonPositiveFocal(PnPError, ValueError):
    pass


class ShapeMismatch(PnPError, ValueError):
    pass


class SingularSystem(PnPError):
    pass


class DegenerateConfiguration(PnPError):
    pass


class InsufficientPoints(PnPError, ValueError):
    pass


class NoValidHypothesis(PnPError):
    pass


class ResampleLimitExceeded(PnPError):
    pass


class MissingGroundTruth(PnPError, ValueError):
    pass


class NonFiniteLoss(PnPError):
    pass


class UnknownMethod(PnPError, ValueError):
    pass


class ConfigError(PnPError, ValueError):
    """Invalid or unknown configuration values."""
