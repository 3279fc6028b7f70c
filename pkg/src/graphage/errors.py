"""Exception types shared across the package."""


class GraphAgeError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(GraphAgeError, ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(GraphAgeError, ValueError):
    """A value lies outside an operation's mathematical domain."""


class ConfigError(GraphAgeError, ValueError):
    """Invalid configuration value or model wiring."""


class DataError(GraphAgeError, ValueError):
    """Malformed dataset, manifest, or label input."""


class TrainingError(GraphAgeError, RuntimeError):
    """Training reached a non-finite quantity or an unusable state."""


class CheckpointError(GraphAgeError, ValueError):
    """Checkpoint bytes do not match the expected layout."""
