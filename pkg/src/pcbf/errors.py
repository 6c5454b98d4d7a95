"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PCBFError(Exception):
    """Base class for every error raised by this package."""


# safety layer
class SafetyError(PCBFError):
    pass


class DegenerateGeometry(SafetyError):
    """Drone center coincides with the obstacle center; no barrier gradient exists."""


class InfeasibleConstraints(SafetyError):
    """The two half-spaces have an empty intersection."""


# environment layer
class InvalidConfig(PCBFError, ValueError):
    pass


class SteppedAfterTermination(PCBFError, RuntimeError):
    pass


class BatchShapeMismatch(PCBFError, ValueError):
    pass


# algorithm layer
class ShapeMismatch(PCBFError, ValueError):
    pass


class CorruptArtifact(PCBFError):
    pass


# ops layer
class IoFailure(PCBFError, OSError):
    pass


class NonMonotonicStep(PCBFError, ValueError):
    pass


class MalformedDataset(PCBFError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InvalidPreRegistration(PCBFError, ValueError):
    pass


class TamperDetected(PCBFError):
    """Recomputed artifact hash does not match the recorded commitment."""


# campaign layer
class InvalidDistribution(PCBFError, ValueError):
    pass


class KeyMismatch(PCBFError, KeyError):
    pass
