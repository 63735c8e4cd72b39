"""Exception types shared across the package."""


class OptionexError(Exception):
    """Base class for all package-specific errors."""


class GenerationFailed(OptionexError):
    """Floorplan generation could not reach a connected layout within the retry budget."""


class EpisodeOver(OptionexError):
    """An atomic action was requested after the episode step budget was exhausted."""


class UnreachableGoal(OptionexError):
    """No traversable path exists from start to goal."""


class InvalidGoal(OptionexError):
    """The requested goal cell is a known obstacle."""


class NoFrontier(OptionexError):
    """The frontier set is empty; nothing left to navigate toward."""


class EmptyBuffer(OptionexError):
    """A parameter update was requested on an empty rollout buffer."""


class DimensionMismatch(OptionexError):
    """Array dimensions are incompatible with the operation's expectations."""


class ConfigError(OptionexError):
    """An experiment configuration is malformed or inconsistent."""


class CheckpointError(OptionexError):
    """A checkpoint file is malformed or does not match the current configuration."""
