"""Reconstruction quality metrics: SNR in decibels and single-scale SSIM."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError, SizeError

SNR_CAP_DB = 300.0


def snr(ref: np.ndarray, test: np.ndarray) -> float:
    """Signal-to-noise ratio 10 log10(sum ref^2 / sum (ref-test)^2) in dB.

    Identical images return the +300 dB sentinel.
    """
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise SizeError("images must share dimensions")
    err = float(np.sum((ref - test) ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    value = 10.0 * np.log10(float(np.sum(ref**2)) / err)
    return float(min(value, SNR_CAP_DB))


def ssim(ref: np.ndarray, test: np.ndarray, data_range: float | None = None) -> float:
    """Single-scale structural similarity with a Gaussian window (std 1.5).

    Local means, variances, and covariance come from Gaussian-weighted
    moments (11x11 support); stabilizing constants use the standard
    K1=0.01, K2=0.03 against ``data_range`` (the reference's dynamic range
    by default). The mean skips a border of the window radius so boundary
    handling never biases the score.
    """
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise SizeError("images must share dimensions")
    if data_range is None:
        data_range = float(ref.max()) - float(ref.min())
        if data_range == 0.0:
            raise DomainError("reference image is constant; pass data_range")
    sigma = 1.5
    truncate = 3.5  # radius 5 -> 11x11 window
    pad = int(truncate * sigma + 0.5)

    def blur(im):
        return gaussian_filter(im, sigma, truncate=truncate, mode="reflect")

    mu1, mu2 = blur(ref), blur(test)
    s11 = blur(ref * ref) - mu1 * mu1
    s22 = blur(test * test) - mu2 * mu2
    s12 = blur(ref * test) - mu1 * mu2
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim_map = ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / (
        (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
    )
    interior = ssim_map[pad:-pad, pad:-pad]
    if interior.size == 0:
        raise SizeError("images too small for the SSIM window")
    return float(interior.mean())
