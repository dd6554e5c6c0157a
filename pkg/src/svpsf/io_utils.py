"""Grayscale image I/O and run-provenance records.

Images are processed internally as float64 linear intensity in [0, 1];
files are 8- or 16-bit grayscale PNG on the way in and 16-bit PNG on the
way out.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DomainError


def read_image(path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG as float64 in [0, 1]."""
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im.convert("I"), dtype=np.float64)
            return arr / 65535.0
        arr = np.asarray(im.convert("L"), dtype=np.float64)
        return arr / 255.0


def write_image_u16(path, image: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> None:
    """Write a float image as 16-bit grayscale PNG, clipping to [vmin, vmax]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DomainError("expected a 2D grayscale image")
    if vmax <= vmin:
        raise DomainError("vmax must exceed vmin")
    scaled = (np.clip(image, vmin, vmax) - vmin) / (vmax - vmin)
    data = np.round(scaled * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data).save(path, format="PNG")


def write_image_normalized(path, image: np.ndarray) -> None:
    """Write with the image's own min/max stretched over the 16-bit range."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        hi = lo + 1.0
    write_image_u16(path, image, vmin=lo, vmax=hi)


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out_path, command: str, settings: dict) -> None:
    """Drop a JSON record of what produced an artifact next to it."""
    from . import __version__

    record = {
        "tool": "svpsf",
        "version": __version__,
        "command": command,
        "settings": settings,
        "settings_hash": hashlib.sha256(
            json.dumps(settings, sort_keys=True, default=str).encode()
        ).hexdigest(),
    }
    sidecar = Path(str(out_path) + ".provenance.json")
    sidecar.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
