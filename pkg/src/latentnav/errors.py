"""Exception types shared across the package."""


class LatentNavError(Exception):
    """Base class for package-specific failures."""


class GenerationError(LatentNavError):
    """World generation could not satisfy its constraints after bounded retries."""


class UnreachableGoalError(LatentNavError):
    """Shortest-path search failed to reach a subgoal (malformed world/task)."""


class ShapeMismatchError(LatentNavError, ValueError):
    """An image/array did not match the configured shape."""


class PrefixRangeError(LatentNavError, ValueError):
    """Requested scale prefix is outside [1, n_scales]."""


class CollapseError(LatentNavError):
    """More than half of the codebook went unused after training."""


class ContextOverflowError(LatentNavError):
    """Token sequence does not fit the model context even after history drops."""


class EmptyMaskError(LatentNavError, ValueError):
    """Loss requested over an all-zero mask."""


class ReplayError(LatentNavError):
    """An action chunk could not be replayed from its recorded state."""


class HashMismatchError(LatentNavError):
    """Dataset header hashes do not match the supplied codec/vocabulary."""


class DivergenceError(LatentNavError):
    """Training loss became non-finite."""


class PositionMismatchError(LatentNavError, ValueError):
    """Action-position counts disagree across reasoning modes."""


class MissingArtifactError(LatentNavError):
    """A referenced artifact (codec, dataset, checkpoint) does not exist."""
