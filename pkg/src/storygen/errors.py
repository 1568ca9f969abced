"""Error taxonomy shared across the package.

The CLI maps these onto stable exit codes (see cli.EXIT_CODES); everything
else raises them directly.
"""


class StorygenError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StorygenError):
    """Invalid or inconsistent configuration (bad spec dims, unknown schedule kind, ...)."""


class ValidationError(StorygenError):
    """Runtime inputs violate an operation's contract (shape/index errors)."""


class DataError(StorygenError):
    """Missing or corrupt data artifacts on disk."""


class StateError(StorygenError):
    """Component used before it reached the required state (e.g. untrained codec)."""


class TrainingFailure(StorygenError):
    """Training did not meet its contract (divergence, unmet validity floor)."""


class NumericalFailure(StorygenError):
    """Non-finite values encountered during sampling or training."""


class IntegrityError(StorygenError):
    """Stored artifact does not match its recorded digest."""
