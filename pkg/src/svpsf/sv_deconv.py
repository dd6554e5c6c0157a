"""Overlap-add spatially-variant convolution and TV-regularized
Richardson-Lucy deconvolution.

A bank of local kernels, one per parameter-map cell, is combined through a
partition-of-unity mask family: blurring is ``sum_m h_m * (mask_m * x)``,
and the deconvolution applies the multiplicative Richardson-Lucy update
patch-wise with the same masks, recombining into a single estimate each
iteration. A total-variation factor divides the update to keep noise from
amplifying while edges survive.

All convolutions extend the field by the kernel radius (reflect boundary)
and crop back, so frequency-domain wrap-around never reaches the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import DomainError, NumericalError, SizeError
from .psf_map import ParamMap


@dataclass
class MaskSet:
    """Separable partition-of-unity weights aligned with a ParamMap grid.

    Mask ``m = row * grid_w + col`` is ``outer(uy[row], ux[col])``; the
    per-axis factors each sum to one at every coordinate, so the family
    sums to one at every pixel.
    """

    ux: np.ndarray  # (grid_w, image_w)
    uy: np.ndarray  # (grid_h, image_h)

    @property
    def grid_w(self) -> int:
        return self.ux.shape[0]

    @property
    def grid_h(self) -> int:
        return self.uy.shape[0]

    @property
    def n_masks(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.uy.shape[1], self.ux.shape[1])

    def mask(self, m: int) -> np.ndarray:
        r, c = divmod(m, self.grid_w)
        return np.outer(self.uy[r], self.ux[c])

    def sum_map(self) -> np.ndarray:
        return np.outer(self.uy.sum(axis=0), self.ux.sum(axis=0))


def _axis_weights(centers: np.ndarray, size: int, radius: float) -> np.ndarray:
    """Normalized tent weights per center along one axis.

    Tents of half-width ``radius`` sit on each center; coordinates are
    renormalized to sum one, and pixels beyond every tent (outer margins)
    are assigned to the nearest center.
    """
    coords = np.arange(size, dtype=float)
    w = np.maximum(0.0, 1.0 - np.abs(coords[None, :] - centers[:, None]) / radius)
    total = w.sum(axis=0)
    covered = total > 0
    w[:, covered] /= total[covered]
    if not covered.all():
        nearest = np.argmin(np.abs(coords[None, :] - centers[:, None]), axis=0)
        for x in np.nonzero(~covered)[0]:
            w[nearest[x], x] = 1.0
    return w


def build_masks(image_shape: tuple[int, int], pmap: ParamMap) -> MaskSet:
    """Bilinear interpolation masks centered on each cell's patch center.

    Tent half-width equals the stride, so adjacent tents cross at exactly
    one half and interior pixels interpolate between the two nearest cells
    per axis; margin pixels outside all tents follow their nearest cell.
    """
    h, w = image_shape
    cx, cy = pmap.cell_centers()
    radius = float(pmap.cfg.stride)
    return MaskSet(ux=_axis_weights(cx, w, radius), uy=_axis_weights(cy, h, radius))


def _padded_geometry(image_shape, kernel_shape):
    k = kernel_shape[0]
    if k % 2 != 1 or kernel_shape[1] != k:
        raise SizeError("kernels must be square with odd side")
    r = k // 2
    ph = image_shape[0] + 2 * r
    pw = image_shape[1] + 2 * r
    fh, fw = sfft.next_fast_len(ph), sfft.next_fast_len(pw)
    return r, (ph, pw), (fh, fw)


def _otf(kernel: np.ndarray, fshape) -> np.ndarray:
    """Frequency response of the kernel centered at the origin."""
    k = kernel.shape[0]
    r = k // 2
    embed = np.zeros(fshape)
    embed[:k, :k] = kernel
    embed = np.roll(embed, (-r, -r), axis=(0, 1))
    return sfft.rfft2(embed)


def _conv_padded(padded: np.ndarray, otf: np.ndarray, fshape) -> np.ndarray:
    spec = sfft.rfft2(padded, s=fshape)
    return sfft.irfft2(spec * otf, s=fshape)[: padded.shape[0], : padded.shape[1]]


def _reflect_pad(image: np.ndarray, r: int) -> np.ndarray:
    return np.pad(image, r, mode="reflect")


def sv_convolve(image: np.ndarray, bank: np.ndarray, masks: MaskSet) -> np.ndarray:
    """Overlap-add spatially-variant blur: ``sum_m h_m * (mask_m * x)``.

    With an identical kernel in every cell this reduces exactly to a
    global convolution because the masks sum to one.
    """
    image = np.asarray(image, dtype=float)
    bank = np.asarray(bank, dtype=float)
    if bank.shape[0] != masks.n_masks:
        raise SizeError(f"bank holds {bank.shape[0]} kernels, masks expect {masks.n_masks}")
    if image.shape != masks.image_shape:
        raise SizeError(f"image {image.shape} does not match masks {masks.image_shape}")
    r, pshape, fshape = _padded_geometry(image.shape, bank.shape[1:])
    acc = np.zeros((fshape[0], fshape[1] // 2 + 1), dtype=complex)
    for m in range(masks.n_masks):
        padded = _reflect_pad(masks.mask(m) * image, r)
        acc += sfft.rfft2(padded, s=fshape) * _otf(bank[m], fshape)
    out = sfft.irfft2(acc, s=fshape)
    return out[r : r + image.shape[0], r : r + image.shape[1]]


@dataclass(frozen=True)
class DeconvConfig:
    """Richardson-Lucy iteration controls.

    lambda_tv
        Total-variation regularization weight (0 disables the factor).
    iterations
        Number of multiplicative updates.
    tv_epsilon
        Gradient-magnitude floor, as a fraction of the input dynamic
        range, that keeps the normalized gradient finite in flat regions.
    nonneg_clamp
        Clamp the estimate at zero after each iteration.
    """

    lambda_tv: float = 0.1
    iterations: int = 20
    tv_epsilon: float = 1e-6
    nonneg_clamp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_tv < 1.0:
            raise DomainError("lambda_tv must lie in [0, 1)")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.tv_epsilon <= 0:
            raise DomainError("tv_epsilon must be positive")


def _tv_factor(x: np.ndarray, lambda_tv: float, eps: float) -> np.ndarray:
    """1 - lambda * div(grad x / |grad x|) with forward/backward differences.

    Forward differences use a reflect boundary (zero gradient at the far
    edge); the divergence is the matching negative-adjoint backward
    difference, so <grad x, p> == -<x, div p> holds exactly.
    """
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :-1] = x[:, 1:] - x[:, :-1]
    gy[:-1, :] = x[1:, :] - x[:-1, :]
    mag = np.sqrt(gx**2 + gy**2 + eps**2)
    px, py = gx / mag, gy / mag
    div = np.zeros_like(x)
    div[:, 0] += px[:, 0]
    div[:, 1:] += px[:, 1:] - px[:, :-1]
    div[0, :] += py[0, :]
    div[1:, :] += py[1:, :] - py[:-1, :]
    return np.maximum(1.0 - lambda_tv * div, 1e-6)


def tv_rl_deconvolve(
    observed: np.ndarray,
    bank: np.ndarray,
    masks: MaskSet,
    cfg: DeconvConfig | None = None,
    *,
    callback=None,
) -> np.ndarray:
    """Spatially-variant Richardson-Lucy with total-variation damping.

    Starting from the observed image, each iteration computes per cell the
    correction ``[h_m * (mask_m y)] / [h_m * x]`` correlated with the
    point-reflected kernel, overlap-adds the corrections, multiplies the
    current estimate, and divides by the TV factor. The per-cell
    numerators depend only on the input and are precomputed once.

    ``callback(iteration, estimate)`` runs after every iteration when
    given, for diagnostics.
    """
    cfg = cfg or DeconvConfig()
    y = np.asarray(observed, dtype=float)
    if np.any(y < 0):
        raise DomainError("observed image must be nonnegative")
    if not y.any():
        raise DomainError("observed image is entirely zero")
    bank = np.asarray(bank, dtype=float)
    if bank.shape[0] != masks.n_masks:
        raise SizeError(f"bank holds {bank.shape[0]} kernels, masks expect {masks.n_masks}")

    h, w = y.shape
    r, pshape, fshape = _padded_geometry(y.shape, bank.shape[1:])
    otfs = [_otf(bank[m], fshape) for m in range(masks.n_masks)]
    # h(-.) correlation: real kernels flip to the conjugate spectrum
    numerators = [
        _conv_padded(_reflect_pad(masks.mask(m) * y, r), otfs[m], fshape)
        for m in range(masks.n_masks)
    ]
    eps = cfg.tv_epsilon * (float(y.max()) - float(y.min()) or 1.0)

    x = y.copy()
    for it in range(cfg.iterations):
        padded_x = _reflect_pad(x, r)
        x_spec = sfft.rfft2(padded_x, s=fshape)
        acc = np.zeros((fshape[0], fshape[1] // 2 + 1), dtype=complex)
        for m in range(masks.n_masks):
            denom = sfft.irfft2(x_spec * otfs[m], s=fshape)[: pshape[0], : pshape[1]]
            ratio = numerators[m] / np.maximum(denom, 1e-12)
            acc += sfft.rfft2(ratio, s=fshape) * np.conj(otfs[m])
        correction = sfft.irfft2(acc, s=fshape)[r : r + h, r : r + w]
        if cfg.lambda_tv == 0.0:
            x = x * correction
        else:
            x = x * correction / _tv_factor(x, cfg.lambda_tv, eps)
        if cfg.nonneg_clamp:
            np.maximum(x, 0.0, out=x)
        if not np.all(np.isfinite(x)):
            raise NumericalError("deconvolution produced non-finite values",
                                 iteration=it)
        if callback is not None:
            callback(it, x)
    return x
