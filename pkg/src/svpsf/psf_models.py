"""Synthesis of discrete PSF kernels from parametric models.

Two synthesis paths produce an odd-sided, nonnegative kernel normalized to
unit sum:

* Zernike models build a pupil-phase grid from defocus and astigmatism
  terms, form the generalized pupil ``P = aperture * exp(i 2 pi W / lambda)``,
  and take the squared magnitude of its Fourier transform.
* Gaussian models sample an anisotropic zero-centered normal density on the
  integer pixel grid.

Kernel coordinates follow image convention: ``kernel[y, x]`` with the
center bin at ``((side-1)/2, (side-1)/2)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegeneratePupilError,
    DomainError,
    InvalidSampleError,
    ModelMismatchError,
    SizeError,
)
from .params import PsfModel, PsfParams

TAU = 2.0 * np.pi

# Default wavelength of 2*pi normalized units makes the generalized-pupil
# exponent exp(i * 2*pi * W / lambda) collapse to exp(i * W), so Zernike
# coefficients are radians of pupil phase.
DEFAULT_WAVELENGTH = TAU


@dataclass(frozen=True)
class PupilConfig:
    """Sampling geometry of the pupil plane.

    side
        Samples across the square pupil grid (even; at least twice the
        kernel side so the Fourier crop keeps its tails).
    aperture_radius
        Aperture radius as a fraction of the grid half-width; the unit
        disk of the Zernike polynomials maps onto this circle.
    wavelength
        Normalized wavelength in the pupil-to-PSF exponent.
    """

    side: int = 256
    aperture_radius: float = 0.8
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        if self.side < 4 or self.side % 2 != 0:
            raise DomainError("pupil side must be even and >= 4")
        if not 0.0 < self.aperture_radius <= 1.0:
            raise DomainError("aperture_radius must be in (0, 1]")
        if self.wavelength <= 0:
            raise DomainError("wavelength must be positive")


@dataclass
class PupilGrid:
    """A pupil-plane phase field tied to its sampling geometry.

    ``phase`` is zero outside the aperture disk.
    """

    config: PupilConfig
    phase: np.ndarray


def _pupil_polar(cfg: PupilConfig):
    """Polar coordinates of the pupil samples and the aperture mask."""
    c = cfg.side // 2
    coords = np.arange(cfg.side, dtype=float) - c
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    r_ap = cfg.aperture_radius * (cfg.side / 2.0)
    rho = np.hypot(xx, yy) / r_ap
    theta = np.arctan2(yy, xx)
    return rho, theta, rho <= 1.0


def zernike_phase(params: PsfParams, cfg: PupilConfig | None = None) -> PupilGrid:
    """Superpose defocus and oriented-astigmatism Zernike terms.

    On the unit disk the phase is

        ``a_defocus * sqrt(3) (2 rho^2 - 1)
        + a_cylinder * sqrt(6) rho^2 cos(2 (theta - axis))``

    with Noll normalization constants. Terms absent from the model
    contribute zero.

    Raises
    ------
    ModelMismatchError
        If ``params.model`` is not a Zernike variant.
    DomainError
        If the astigmatism axis lies outside (0, pi).
    """
    cfg = cfg or PupilConfig()
    if not params.model.is_zernike:
        raise ModelMismatchError(f"{params.model.value} is not a Zernike model")
    params.validate()

    rho, theta, mask = _pupil_polar(cfg)
    phase = params.defocus * np.sqrt(3.0) * (2.0 * rho**2 - 1.0)
    axis = params.axis
    if params.cylinder != 0.0 and axis is not None:
        phase = phase + params.cylinder * np.sqrt(6.0) * rho**2 * np.cos(2.0 * (theta - axis))
    phase = np.where(mask, phase, 0.0)
    return PupilGrid(cfg, phase)


def psf_from_pupil(grid: PupilGrid, kernel_side: int) -> np.ndarray:
    """Turn a pupil phase grid into a normalized intensity kernel.

    The generalized pupil ``P = 1_disk * exp(i 2 pi phase / wavelength)``
    is Fourier transformed; the kernel is ``|F{P}|^2`` center-cropped to
    ``kernel_side`` (DC at the kernel center) and normalized to unit sum.

    Raises
    ------
    SizeError
        If ``kernel_side`` is even or exceeds half the pupil grid.
    DegeneratePupilError
        If the aperture disk contains no samples.
    DomainError
        If the crop would discard more than 1% of the kernel energy
        (enlarge the pupil grid side in that case).
    """
    cfg = grid.config
    if kernel_side % 2 != 1:
        raise SizeError("kernel_side must be odd")
    if kernel_side > cfg.side // 2:
        raise SizeError(f"kernel_side {kernel_side} exceeds pupil side/2 = {cfg.side // 2}")

    _, _, mask = _pupil_polar(cfg)
    if mask.sum() <= 1:
        # a pupil of zero or one sample carries no structure: |F|^2 is flat
        raise DegeneratePupilError("aperture disk holds no usable pupil samples")

    pupil = np.where(mask, np.exp(1j * TAU * grid.phase / cfg.wavelength), 0.0)
    intensity = np.abs(np.fft.fft2(pupil)) ** 2
    intensity = np.fft.fftshift(intensity)

    c = cfg.side // 2
    h = (kernel_side - 1) // 2
    crop = intensity[c - h : c + h + 1, c - h : c + h + 1]
    kept = crop.sum() / intensity.sum()
    if kept < 0.99:
        raise DomainError(
            f"kernel crop keeps only {kept:.4f} of the energy; "
            "enlarge the pupil grid side or the kernel"
        )
    return crop / crop.sum()


def gaussian_density(variance_x: float, variance_y: float, kernel_side: int) -> np.ndarray:
    """Sample the separable zero-centered normal density on the pixel grid.

    ``density[y, x] = N(x; variance_x) * N(y; variance_y)`` without the
    discrete renormalization, so closed-form values (e.g. the center value
    ``1 / (2 pi sqrt(vx vy))``) hold exactly.
    """
    if variance_x <= 0 or variance_y <= 0:
        raise DomainError("Gaussian variances must be positive")
    if kernel_side % 2 != 1:
        raise SizeError("kernel_side must be odd")
    x = np.arange(kernel_side, dtype=float) - (kernel_side - 1) / 2.0
    gx = np.exp(-0.5 * x**2 / variance_x) / np.sqrt(TAU * variance_x)
    gy = np.exp(-0.5 * x**2 / variance_y) / np.sqrt(TAU * variance_y)
    return np.outer(gy, gx)


def gaussian_psf(params: PsfParams, kernel_side: int) -> np.ndarray:
    """Render an anisotropic Gaussian kernel normalized to unit sum.

    The one-parameter variant uses the same variance on both axes.
    """
    if not params.model.is_gaussian:
        raise ModelMismatchError(f"{params.model.value} is not a Gaussian model")
    params.validate()
    vx = float(params.a[0])
    vy = float(params.a[1]) if params.model is PsfModel.GAUSSIAN2 else vx
    density = gaussian_density(vx, vy, kernel_side)
    return density / density.sum()


def render_psf(
    params: PsfParams,
    kernel_side: int,
    pupil: PupilConfig | None = None,
) -> np.ndarray:
    """Dispatch to the Zernike or Gaussian synthesis path.

    Raises
    ------
    InvalidSampleError
        If the validity flag marks the parameters as untextured (a0 >= 0.5).
    """
    if params.a0 >= 0.5:
        raise InvalidSampleError("parameters are flagged invalid (a0 >= 0.5)")
    if params.model.is_zernike:
        return psf_from_pupil(zernike_phase(params, pupil), kernel_side)
    return gaussian_psf(params, kernel_side)


_PSF_MAGIC = b"PSF1"


def save_psf(kernel: np.ndarray, path) -> None:
    """Write a kernel as magic "PSF1", u32 side, row-major little-endian f32."""
    kernel = np.asarray(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise SizeError("PSF kernels must be square 2D arrays")
    with open(path, "wb") as fh:
        fh.write(_PSF_MAGIC)
        fh.write(struct.pack("<I", kernel.shape[0]))
        fh.write(np.ascontiguousarray(kernel, dtype="<f4").tobytes())


def load_psf(path) -> np.ndarray:
    """Read a kernel written by :func:`save_psf`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PSF_MAGIC:
            raise DomainError(f"bad PSF magic {magic!r}")
        (side,) = struct.unpack("<I", fh.read(4))
        data = fh.read(4 * side * side)
        if len(data) != 4 * side * side:
            raise SizeError("truncated PSF file")
        return np.frombuffer(data, dtype="<f4").reshape(side, side).astype(float)
