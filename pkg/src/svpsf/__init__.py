"""svpsf: spatially-variant PSF estimation, deconvolution, and depth recovery."""

__version__ = "0.1.0"

from .params import ParamRanges, PsfModel, PsfParams, default_ranges
from .psf_models import (
    PupilConfig,
    PupilGrid,
    gaussian_psf,
    psf_from_pupil,
    render_psf,
    zernike_phase,
)

__all__ = [
    "ParamRanges",
    "PsfModel",
    "PsfParams",
    "PupilConfig",
    "PupilGrid",
    "default_ranges",
    "gaussian_psf",
    "psf_from_pupil",
    "render_psf",
    "zernike_phase",
    "__version__",
]
