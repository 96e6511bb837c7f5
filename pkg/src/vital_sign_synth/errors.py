"""Exceptions raised across the package"""

from typing import List, Optional, Sequence


class VitalSignError(Exception):
    """Base class for all errors raised by vital_sign_synth."""


class ParameterError(VitalSignError, ValueError):
    """An argument violates an operation's precondition."""


class DegenerateSeriesError(ParameterError):
    """A series has no variation where variation is required."""


class InsufficientPeaksError(VitalSignError):
    """A rate needs at least two peaks or events."""

    def __init__(self, count: int) -> None:
        """Store the number of peaks that were available."""
        super().__init__(
            f"At least 2 peaks are required to compute a rate, got {count}"
        )
        self.count = count


class EmptyRoiError(VitalSignError):
    """One or more ROI boxes do not intersect their frame."""

    def __init__(self, frames: Sequence[int]) -> None:
        """Store the indices of the frames with an empty intersection."""
        self.frames: List[int] = list(frames)
        super().__init__(
            f"ROI box does not intersect the frame at frames {self.frames}"
        )


class EmptyPredictionError(VitalSignError):
    """A predicted ROI mask has no pixels set."""


class SceneCompositionError(VitalSignError, RuntimeError):
    """Masks handed to the compositor overlap."""


class ModelNumericError(VitalSignError, ArithmeticError):
    """A model activation, loss or gradient is not finite."""

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        """Store the name of the offending tensor, if known."""
        if tensor_name is not None:
            message = f"{message} (tensor: {tensor_name})"
        super().__init__(message)
        self.tensor_name = tensor_name


class TrainingDivergedError(VitalSignError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, trace: list) -> None:
        """Store the failing step and the loss trace up to that point."""
        super().__init__(f"Training diverged at step {step}")
        self.step = step
        self.trace = trace


class FormatError(VitalSignError, ValueError):
    """A file does not follow the expected layout."""

    def __init__(
        self, message: str, path: Optional[str] = None, line: int = None
    ) -> None:
        """Store the offending path and line number, if known."""
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line
