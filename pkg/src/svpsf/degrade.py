"""Forward degradation simulation and training-set generation.

The pipeline that turns a sharp source image into a labeled training patch:
convolve with a rendered PSF on an extended field, corrupt with mixed
Poisson-Gaussian sensor noise, crop a random region of interest, and tag
patches that lack usable texture as invalid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DomainError, SizeError
from .params import ParamRanges, PsfModel, PsfParams, default_ranges
from .psf_models import PupilConfig, render_psf

_PAD_MODE = {"reflect": "reflect", "replicate": "edge"}


def convolve(image: np.ndarray, psf: np.ndarray, boundary: str = "reflect") -> np.ndarray:
    """Blur ``image`` with ``psf`` using frequency-domain linear convolution.

    The image is padded by the kernel radius with the chosen boundary rule
    before transforming, and the result is cropped back to the input size,
    so a constant image stays constant and no wrap-around aliasing leaks in.

    Parameters
    ----------
    image : 2D array of intensities
    psf : 2D odd-sided kernel, normalized to unit sum
    boundary : "reflect" (mirror about the edge pixel) or "replicate"
    """
    image = np.asarray(image, dtype=float)
    psf = np.asarray(psf, dtype=float)
    if image.ndim != 2 or psf.ndim != 2:
        raise SizeError("convolve expects 2D arrays")
    if psf.shape[0] % 2 != 1 or psf.shape[1] % 2 != 1:
        raise SizeError("kernel sides must be odd")
    if psf.shape[0] > image.shape[0] or psf.shape[1] > image.shape[1]:
        raise SizeError(f"kernel {psf.shape} larger than image {image.shape}")
    if boundary not in _PAD_MODE:
        raise ConfigError(f"unknown boundary rule {boundary!r}")

    ry, rx = psf.shape[0] // 2, psf.shape[1] // 2
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode=_PAD_MODE[boundary])
    out = fftconvolve(padded, psf, mode="same")
    return out[ry : ry + image.shape[0], rx : rx + image.shape[1]]


def correlate(image: np.ndarray, psf: np.ndarray, boundary: str = "reflect") -> np.ndarray:
    """Cross-correlate, i.e. convolve with the point-reflected kernel."""
    return convolve(image, np.asarray(psf)[::-1, ::-1], boundary)


@dataclass(frozen=True)
class NoiseConfig:
    """Mixed Poisson-Gaussian sensor noise.

    beta
        Quantum efficiency scaling the photon (Poisson) component, in [0, 1].
    sigma
        Standard deviation of the additive zero-mean read noise.
    seed
        Seed of the generator; identical configs give bit-identical noise.
    """

    beta: float = 1.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError("beta must be in [0, 1]")
        if self.sigma < 0.0:
            raise DomainError("sigma must be >= 0")


def _apply_noise(image: np.ndarray, beta: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    photons = rng.poisson(image).astype(float)
    read = rng.normal(0.0, sigma, size=image.shape) if sigma > 0 else 0.0
    return beta * photons + read


def add_noise(image: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    """Draw ``beta * Poisson(pixel) + N(0, sigma^2)`` per pixel.

    Pixel values are photon expectations, so the input must be nonnegative.
    Negative outputs are permitted (read noise after offset subtraction).
    """
    image = np.asarray(image, dtype=float)
    if np.any(image < 0):
        raise DomainError("photon expectations must be nonnegative")
    return _apply_noise(image, cfg.beta, cfg.sigma, np.random.default_rng(cfg.seed))


def illumination_perturb(
    image: np.ndarray,
    kind: str,
    strength: float,
    *,
    sign: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """Simulate illumination problems: a global gain or a linear ramp.

    ``global_gain`` multiplies all pixels by ``1 + sign * strength``;
    ``gradient`` multiplies by a ramp spanning ``[1 - strength, 1 + strength]``
    along a randomly chosen axis and direction.
    """
    image = np.asarray(image, dtype=float)
    if not 0.0 <= strength <= 1.0:
        raise DomainError("strength must be in [0, 1]")
    if kind == "global_gain":
        return image * (1.0 + (1 if sign >= 0 else -1) * strength)
    if kind == "gradient":
        rng = np.random.default_rng(seed)
        axis = int(rng.integers(0, 2))
        ramp = np.linspace(1.0 - strength, 1.0 + strength, image.shape[axis])
        if rng.integers(0, 2):
            ramp = ramp[::-1]
        if axis == 0:
            return image * ramp[:, None]
        return image * ramp[None, :]
    raise ConfigError(f"unknown illumination kind {kind!r}")


def validity_check(
    patch: np.ndarray,
    var_threshold: float = 1e-4,
    white_ratio_threshold: float = 0.5,
) -> bool:
    """Return True when the patch is unusable for blur estimation.

    A patch is invalid when its variance, normalized by the squared dynamic
    range, falls below ``var_threshold`` (flat or empty content), or when
    the fraction of pixels in the top 5% of the dynamic range exceeds
    ``white_ratio_threshold`` (saturation).
    """
    patch = np.asarray(patch, dtype=float)
    if patch.size == 0:
        raise SizeError("empty patch")
    if var_threshold < 0 or white_ratio_threshold < 0:
        raise DomainError("thresholds must be >= 0")
    lo = float(patch.min())
    span = float(patch.max()) - lo
    if span == 0.0:
        return True
    if patch.var() / span**2 < var_threshold:
        return True
    white = float(np.mean(patch > lo + 0.95 * span))
    return white > white_ratio_threshold


def synth_points(count: int, size: int, seed: int = 0) -> np.ndarray:
    """Scatter isolated bright pixels on a black background.

    Points keep a minimum separation of 3 pixels so each one stays a
    distinct local maximum before any blurring.
    """
    rng = np.random.default_rng(seed)
    image = np.zeros((size, size))
    placed: list[tuple[int, int]] = []
    attempts = 0
    while len(placed) < count and attempts < 1000 * max(count, 1):
        attempts += 1
        y = int(rng.integers(2, size - 2))
        x = int(rng.integers(2, size - 2))
        if all(abs(y - py) > 2 or abs(x - px) > 2 for py, px in placed):
            image[y, x] = rng.uniform(0.4, 1.0)
            placed.append((y, x))
    if len(placed) < count:
        raise ConfigError(f"could not place {count} separated points on a {size}px image")
    return image


def synth_cells(count: int, size: int, seed: int = 0) -> np.ndarray:
    """Overlay soft-edged elliptical blobs of varying intensity on black."""
    rng = np.random.default_rng(seed)
    image = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(count):
        cy, cx = rng.uniform(0, size, size=2)
        ax = rng.uniform(size / 24, size / 6)
        bx = rng.uniform(size / 24, size / 6)
        angle = rng.uniform(0, np.pi)
        intensity = rng.uniform(0.25, 1.0)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        radius = np.sqrt((u / ax) ** 2 + (v / bx) ** 2)
        blob = intensity * (0.5 - 0.5 * np.tanh((radius - 1.0) / 0.12))
        np.maximum(image, blob, out=image)
    return image


@dataclass
class TrainingSample:
    """One degraded patch with its ground-truth parameters."""

    patch: np.ndarray
    params: PsfParams
    source_tag: str
    seed: int


@dataclass
class TrainingSet:
    """An ordered collection of samples plus the generation manifest."""

    samples: list[TrainingSample]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


def build_source_pool(
    kinds=("poi", "syn"),
    n_each: int = 32,
    size: int = 128,
    seed: int = 0,
) -> list[tuple[str, np.ndarray]]:
    """Generate a pool of sharp synthetic source images, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    pool: list[tuple[str, np.ndarray]] = []
    for kind in kinds:
        for _ in range(n_each):
            sub = int(rng.integers(0, 2**31 - 1))
            if kind == "poi":
                img = synth_points(int(rng.integers(6, 40)), size, seed=sub)
            elif kind == "syn":
                img = synth_cells(int(rng.integers(6, 25)), size, seed=sub)
            else:
                raise ConfigError(f"unknown synthetic source kind {kind!r}")
            pool.append((kind, img))
    return pool


def load_image_folder(path, tag: str = "micr") -> list[tuple[str, np.ndarray]]:
    """Load user-supplied grayscale images as additional sources."""
    from .io_utils import read_image

    folder = Path(path)
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff"))
    if not files:
        raise ConfigError(f"no images found in {folder}")
    return [(tag, read_image(p)) for p in files]


def _generate_sample(
    k: int,
    pool,
    model: PsfModel,
    patch_size: int,
    noise: NoiseConfig,
    ranges: ParamRanges,
    seed: int,
    kernel_side: int,
    pupil: PupilConfig | None,
    peak: float,
) -> TrainingSample:
    """Generate sample ``k``; fully reproducible from ``seed ^ k``."""
    sample_seed = seed ^ k
    rng = np.random.default_rng(sample_seed)
    tag, source = pool[int(rng.integers(0, len(pool)))]
    rot = int(rng.integers(0, 3))  # 0, +90, -90 degrees
    source = np.rot90(source, (0, 1, 3)[rot])
    params = ranges.draw(model, rng)
    kernel = render_psf(params, kernel_side, pupil)
    # FFT roundoff can leave tiny negatives on black backgrounds; photon
    # expectations must stay nonnegative
    blurred = np.maximum(convolve(source * peak, kernel), 0.0)
    noisy = _apply_noise(blurred, noise.beta, noise.sigma, rng)
    h, w = blurred.shape
    if patch_size > min(h, w):
        raise SizeError(f"patch size {patch_size} exceeds source size {h}x{w}")
    y0 = int(rng.integers(0, h - patch_size + 1))
    x0 = int(rng.integers(0, w - patch_size + 1))
    clean_crop = blurred[y0 : y0 + patch_size, x0 : x0 + patch_size]
    patch = noisy[y0 : y0 + patch_size, x0 : x0 + patch_size]
    # legitimacy is a property of the underlying signal, so the texture
    # check runs on the noise-free crop
    a0 = 1.0 if validity_check(clean_crop) else 0.0
    labeled = PsfParams(model, params.a.copy(), a0=a0)
    return TrainingSample(patch, labeled, tag, sample_seed)


def generate_dataset(
    sources,
    model: PsfModel,
    count: int,
    patch_size: int,
    noise: NoiseConfig,
    ranges: ParamRanges | None = None,
    seed: int = 0,
    *,
    kernel_side: int = 63,
    pupil: PupilConfig | None = None,
    peak: float = 1000.0,
    black_fraction: float = 0.05,
) -> TrainingSet:
    """Build a labeled training set of degraded patches.

    For each sample: pick a source (with +/-90 degree rotation
    augmentation), draw PSF parameters uniformly inside ``ranges``, render
    the kernel, convolve, add noise, crop a random region, and tag
    untextured crops as invalid. A ``black_fraction`` of noise-only black
    frames with forced-invalid labels is appended.

    Sources are sharp images in [0, 1]; ``peak`` scales them to photon
    counts before the Poisson draw. Sample ``k`` derives its generator from
    ``seed ^ k``, so generation order never affects content.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    pool = list(sources)
    if not pool:
        raise ConfigError("source pool is empty")
    ranges = ranges or default_ranges()

    samples = [
        _generate_sample(k, pool, model, patch_size, noise, ranges, seed,
                         kernel_side, pupil, peak)
        for k in range(count)
    ]
    n_black = int(round(black_fraction * count))
    for k in range(count, count + n_black):
        sample_seed = seed ^ k
        rng = np.random.default_rng(sample_seed)
        patch = _apply_noise(np.zeros((patch_size, patch_size)), noise.beta, noise.sigma, rng)
        params = PsfParams(model, np.zeros(model.n_params), a0=1.0)
        samples.append(TrainingSample(patch, params, "black", sample_seed))

    manifest = {
        "version": 1,
        "model": model.value,
        "ranges": ranges.to_dict(),
        "patch_size": patch_size,
        "kernel_side": kernel_side,
        "peak": peak,
        "beta": noise.beta,
        "sigma": noise.sigma,
        "seed": seed,
        "count": count,
        "count_black": n_black,
    }
    return TrainingSet(samples, manifest)


def save_training_set(ts: TrainingSet, out_dir) -> None:
    """Write a dataset as 16-bit PNG patches + manifest CSV + JSON header."""
    from .io_utils import write_image_u16

    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    qmax = max(float(max(s.patch.max() for s in ts.samples)), 1e-12)
    header = dict(ts.manifest)
    header["qmax"] = qmax
    header["count_total"] = len(ts.samples)
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))

    n_params = max(s.params.model.n_params for s in ts.samples)
    lines = ["path,model,a0," + ",".join(f"a{i+1}" for i in range(n_params)) + ",source_tag,seed"]
    for i, s in enumerate(ts.samples):
        rel = f"patches/{i:06d}.png"
        write_image_u16(out / rel, np.clip(s.patch, 0.0, qmax) / qmax)
        a = list(s.params.a) + [0.0] * (n_params - s.params.a.size)
        vals = ",".join(f"{v:.17g}" for v in a)
        lines.append(f"{rel},{s.params.model.value},{s.params.a0:g},{vals},{s.source_tag},{s.seed}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")


def load_training_set(in_dir) -> TrainingSet:
    """Read a dataset written by :func:`save_training_set`."""
    from .io_utils import read_image

    src = Path(in_dir)
    header = json.loads((src / "header.json").read_text())
    qmax = float(header.pop("qmax"))
    header.pop("count_total", None)
    rows = (src / "manifest.csv").read_text().strip().split("\n")
    cols = rows[0].split(",")
    n_params = sum(1 for c in cols if c.startswith("a") and c != "a0")
    samples = []
    for row in rows[1:]:
        parts = row.split(",")
        rel, model_name, a0 = parts[0], parts[1], float(parts[2])
        a_all = [float(v) for v in parts[3 : 3 + n_params]]
        tag, sample_seed = parts[3 + n_params], int(parts[4 + n_params])
        model = PsfModel.parse(model_name)
        patch = read_image(src / rel) * qmax
        params = PsfParams(model, np.asarray(a_all[: model.n_params]), a0=a0)
        samples.append(TrainingSample(patch, params, tag, sample_seed))
    return TrainingSet(samples, header)
