from typing import Optional


class MRCoError(Exception):
    """Base class for all MRCo errors."""
    pass

class ValidationError(MRCoError):
    """Raised when input data or an invariant fails validation."""
    pass

class ShapeError(ValidationError):
    """Raised when tensor shapes do not conform to a primitive's signature."""
    def __init__(self, op: str, *shapes):
        shape_text = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shape_text}")
        self.op = op
        self.shapes = [tuple(s) for s in shapes]

class ConfigurationError(ValidationError):
    """Raised when there's a configuration error."""
    pass

class DataFormatError(ValidationError):
    """Raised when a data file is malformed."""
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

class GradientError(MRCoError):
    """Raised when a gradient cannot be computed or is not finite."""
    def __init__(self, message: str, details: dict = None):
        super().__init__(message)
        self.details = details or {}

class CheckpointError(MRCoError):
    """Raised when a checkpoint cannot be written or read."""
    pass

class ExperimentError(MRCoError):
    """Raised when an experiment run fails; partial results stay on disk."""
    def __init__(self, message: str, partial_path: Optional[str] = None):
        super().__init__(message)
        self.partial_path = partial_path
