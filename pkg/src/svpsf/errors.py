"""Exception types shared across the package."""


class SvpsfError(Exception):
    """Base class for all svpsf errors."""


class DomainError(SvpsfError, ValueError):
    """A numeric argument is outside its mathematically valid domain."""


class ModelMismatchError(SvpsfError, ValueError):
    """An operation received parameters of an incompatible PSF model."""


class SizeError(SvpsfError, ValueError):
    """Array dimensions are incompatible with the requested operation."""


class DegeneratePupilError(SvpsfError):
    """The pupil aperture contains no samples."""


class InvalidSampleError(SvpsfError):
    """Parameters are flagged invalid (no texture) and cannot be rendered."""


class ConfigError(SvpsfError):
    """A configuration value is missing, malformed, or cross-inconsistent."""


class InfillError(SvpsfError):
    """A parameter map contains no valid cell to interpolate from."""


class TrainingError(SvpsfError):
    """Every training candidate diverged."""


class NumericalError(SvpsfError):
    """A numeric iteration produced non-finite values."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
