"""
Exception types raised across the DGM training engine.
"""

from typing import Optional, Sequence


class DGMError(Exception):
    """Base class for every failure the engine reports"""


class DimensionError(DGMError):
    """Two shapes that must conform do not"""

    def __init__(self, message: str, left: Optional[Sequence[int]] = None, right: Optional[Sequence[int]] = None):
        if left is not None and right is not None:
            message = f"{message}: {tuple(left)} vs {tuple(right)}"
        super().__init__(message)
        self.left = tuple(left) if left is not None else None
        self.right = tuple(right) if right is not None else None


class UsageError(DGMError):
    """An operation was called outside its contract"""


class ConfigurationError(DGMError):
    """A configuration is inconsistent with the data or the model"""


class LabelingError(DGMError):
    """A label row cannot be used by the requested computation"""


class GenerationError(DGMError):
    """Synthetic data could not be generated with the requested settings"""


class ValidationError(DGMError):
    """A stored artifact disagrees with its own manifest"""


class ParseError(DGMError):
    """A stored artifact could not be decoded"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(DGMError):
    """A forward or backward pass produced a non-finite value"""

    def __init__(self, message: str, batch_id: Optional[int] = None):
        if batch_id is not None:
            message = f"{message} (batch {batch_id})"
        super().__init__(message)
        self.batch_id = batch_id
