"""Exception types shared across the package.

The CLI maps ValueError-family errors (bad inputs, malformed files, bad
flags) to exit code 1 and RuntimeError-family errors to exit code 2.
"""


class CollabsegError(Exception):
    """Base class for package errors."""


class SizingError(CollabsegError, ValueError):
    """Tensor has an unsupported shape or spatial size."""


class AnnotationError(CollabsegError, ValueError):
    """Scribble annotation is missing, malformed, or degenerate."""


class PromptError(CollabsegError, ValueError):
    """Box prompt construction failed."""


class DataError(CollabsegError, ValueError):
    """Dataset files missing or inconsistent."""


class SegmenterError(CollabsegError, RuntimeError):
    """Guided-segmenter backend missing or misconfigured."""
