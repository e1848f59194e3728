"""Exception types raised across the package."""


class LaserError(Exception):
    """Base class for all package errors."""


class AllColumnsDegenerate(LaserError):
    pass


class RankTooLarge(LaserError):
    pass


class NotOrthonormal(LaserError):
    pass


class DimensionMismatch(LaserError):
    pass


class DegenerateInit(LaserError):
    """Activation batch too close to zero to seed a basis from."""


class DegenerateReference(LaserError):
    pass


class ShapeMismatch(LaserError):
    pass


class UninitializedTracker(LaserError):
    pass


class TapeMismatch(LaserError):
    pass


class NonFiniteLoss(LaserError):
    pass


class Unreachable(LaserError):
    pass


class CorruptFile(LaserError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(LaserError):
    pass
