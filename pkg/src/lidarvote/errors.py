"""Exception types raised across the package."""

from __future__ import annotations


class LidarVoteError(Exception):
    """Base class for all package errors."""


class ParseError(LidarVoteError, ValueError):
    """A scan, pose, label or config file could not be parsed.

    The message always names the file, and the line when one applies.
    """

    def __init__(self, path, message: str, line: int | None = None) -> None:
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class PoseError(LidarVoteError, ValueError):
    """A rotation matrix is not a proper orthonormal rotation."""


class SegmentationError(LidarVoteError):
    """A 2D segmenter failed to produce a valid result for a view."""


class MissingResultError(SegmentationError, FileNotFoundError):
    """An expected segmenter output file is absent."""

    def __init__(self, view_index: int, path) -> None:
        self.view_index = view_index
        self.path = str(path)
        super().__init__(f"missing segmentation result for view {view_index}: {self.path}")


class ShapeMismatchError(LidarVoteError, ValueError):
    """Array dimensions disagree with the view or class count they belong to."""


class MissingGroundTruthError(LidarVoteError, ValueError):
    """An operation needing ground-truth classes got a cloud without them."""


class StageError(LidarVoteError):
    """Wraps the first failing pipeline stage's error with the stage name."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
