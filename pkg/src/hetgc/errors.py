"""Exception types raised across the package."""


class HetGCError(Exception):
    """Base class for all package errors."""


class InvalidBitWidth(HetGCError, ValueError):
    pass


class InvalidInput(HetGCError, ValueError):
    pass


class DecodeError(HetGCError, ValueError):
    pass


class InvalidThreshold(HetGCError, ValueError):
    pass


class DegenerateWorker(HetGCError, ValueError):
    pass


class InfeasibleBudget(HetGCError, ValueError):
    pass


class InvalidCost(HetGCError, ValueError):
    pass


class InvalidMass(HetGCError, ValueError):
    pass


class InstanceTooLarge(HetGCError, ValueError):
    pass


class InfeasibleDesign(HetGCError, ValueError):
    pass


class NonFiniteGradient(HetGCError, FloatingPointError):
    pass


class ConfigError(HetGCError):
    """Bad experiment configuration; carries the offending line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
