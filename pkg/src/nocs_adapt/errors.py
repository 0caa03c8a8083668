"""Exception types shared across the package."""


class DegenerateInput(ValueError):
    """Point configuration cannot determine a similarity transform."""


class NoConsensus(RuntimeError):
    """RANSAC found no hypothesis with enough inliers."""


class EmptySelection(ValueError):
    """A mask or filter selected no points."""


class ShapeMismatch(ValueError):
    pass


class UnknownClass(KeyError):
    pass


class InvalidSpec(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass
