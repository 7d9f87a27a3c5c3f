"""
Domain errors raised by the gridworld, expert, agent and training layers.

Callers at the boundaries (cli.py, the FastAPI app) translate these into exit
codes and HTTP responses; inside the library they propagate unchanged.
"""


class UnsatisfiableLayoutError(ValueError):
    """The layout cannot be generated, or cannot be rendered, under the current settings."""


class InvalidPoseError(ValueError):
    """A pose lies outside the grid or on a blocked cell."""


class UnknownClassError(ValueError):
    """A class name is not part of the configured vocabulary."""


class EpisodeTerminatedError(RuntimeError):
    """step() was called on an episode that already received Stop."""


class ShapeMismatchError(ValueError):
    """An array does not have the shape the configuration implies."""


class VocabularyError(ValueError):
    """A token or token id is outside the frozen vocabulary."""


class DatasetBuildError(RuntimeError):
    """Dataset generation ran out of retries for an episode."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
