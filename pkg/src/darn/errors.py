"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class GeometryError(ValueError):
    """Spatial geometry is invalid (non-integral output extent, bad kernel)."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of the operation."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (double backward, non-scalar root, ...)."""


class ConfigError(ValueError):
    """Run configuration could not be parsed or validated."""


class IncompleteGridError(ValueError):
    """A corruption/severity grid is missing required cells."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or inconsistent."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""
