"""Sliding-window PSF parameter mapping over a full image.

An overlapping window walks the image on a stride lattice; each crop runs
through the regressor, giving a grid of local PSF parameters plus validity
scores. Cells the regressor flags as untextured are filled in from their
nearest valid neighbors so that the downstream deconvolution never sees a
hole, and the completed map renders into a per-cell kernel bank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfillError, SizeError
from .estimator import RegressorModel
from .params import ParamRanges, PsfModel, PsfParams
from .psf_models import PupilConfig, render_psf


@dataclass(frozen=True)
class MapConfig:
    """Window geometry for parameter mapping.

    The stride must not exceed the patch side, so consecutive windows
    overlap (or at least tile) the image.
    """

    patch_w: int = 64
    patch_h: int = 64
    stride: int = 32
    validity_threshold: float = 0.5

    def __post_init__(self):
        if not 1 <= self.stride <= min(self.patch_w, self.patch_h):
            raise ConfigError("stride must satisfy 1 <= stride <= patch side")
        if not 0.0 <= self.validity_threshold <= 1.0:
            raise ConfigError("validity_threshold must be in [0, 1]")


def grid_shape(image_w: int, image_h: int, cfg: MapConfig) -> tuple[int, int]:
    """Number of window anchors along each axis: floor((size-patch)/t) + 1."""
    if image_w < cfg.patch_w or image_h < cfg.patch_h:
        raise SizeError(f"image {image_w}x{image_h} smaller than patch "
                        f"{cfg.patch_w}x{cfg.patch_h}")
    gw = (image_w - cfg.patch_w) // cfg.stride + 1
    gh = (image_h - cfg.patch_h) // cfg.stride + 1
    return gw, gh


@dataclass
class ParamMap:
    """A patch-grid of PSF parameters covering one image.

    ``a`` holds physical parameter vectors per cell, ``a0`` the raw
    validity score from the regressor (0 textured, 1 untextured). Anchors
    are top-left crop coordinates per grid column/row.
    """

    model: PsfModel
    a: np.ndarray        # (grid_h, grid_w, N)
    a0: np.ndarray       # (grid_h, grid_w)
    anchors_x: np.ndarray
    anchors_y: np.ndarray
    image_shape: tuple[int, int]
    cfg: MapConfig
    ranges: ParamRanges = field(default_factory=ParamRanges)

    @property
    def grid_h(self) -> int:
        return self.a.shape[0]

    @property
    def grid_w(self) -> int:
        return self.a.shape[1]

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def valid_mask(self) -> np.ndarray:
        return self.a0 <= self.cfg.validity_threshold

    def cell_params(self, row: int, col: int) -> PsfParams:
        return PsfParams(self.model, self.a[row, col].copy(), a0=float(self.a0[row, col]))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Patch-center coordinates (x per column, y per row)."""
        cx = self.anchors_x + (self.cfg.patch_w - 1) / 2.0
        cy = self.anchors_y + (self.cfg.patch_h - 1) / 2.0
        return cx, cy


def map_from_cells(model, cells, cfg, image_shape, ranges=None) -> ParamMap:
    """Assemble a ParamMap from an explicit (grid_h, grid_w) nest of PsfParams."""
    gh, gw = len(cells), len(cells[0])
    n = model.n_params
    a = np.zeros((gh, gw, n))
    a0 = np.zeros((gh, gw))
    for r in range(gh):
        for c in range(gw):
            a[r, c] = cells[r][c].a
            a0[r, c] = cells[r][c].a0
    ax = np.arange(gw) * cfg.stride
    ay = np.arange(gh) * cfg.stride
    return ParamMap(model, a, a0, ax, ay, image_shape, cfg,
                    ranges or ParamRanges())


def map_params(image: np.ndarray, model: RegressorModel, cfg: MapConfig,
               batch_size: int = 128) -> ParamMap:
    """Regress local PSF parameters on the window lattice of ``image``."""
    image = np.asarray(image, dtype=float)
    if cfg.patch_w != model.patch_size or cfg.patch_h != model.patch_size:
        raise ConfigError(
            f"window {cfg.patch_w}x{cfg.patch_h} does not match the regressor "
            f"input {model.patch_size}x{model.patch_size}"
        )
    h, w = image.shape
    gw, gh = grid_shape(w, h, cfg)
    ax = np.arange(gw) * cfg.stride
    ay = np.arange(gh) * cfg.stride

    crops = np.empty((gh * gw, cfg.patch_h, cfg.patch_w))
    for r in range(gh):
        for c in range(gw):
            y0, x0 = ay[r], ax[c]
            crops[r * gw + c] = image[y0 : y0 + cfg.patch_h, x0 : x0 + cfg.patch_w]

    outs = []
    for i in range(0, crops.shape[0], batch_size):
        outs.append(model.forward(crops[i : i + batch_size]))
    out = np.concatenate(outs, axis=0)

    n = model.model.n_params
    a = np.empty((gh, gw, n))
    a0 = out[:, 0].reshape(gh, gw).copy()
    for r in range(gh):
        for c in range(gw):
            a[r, c] = model.ranges.denormalize(model.model, out[r * gw + c, 1:]).a
    return ParamMap(model.model, a, a0, ax, ay, (h, w), cfg, model.ranges)


def infill_invalid(pmap: ParamMap, *, k_neighbors: int = 4, max_ring: int = 8) -> ParamMap:
    """Replace invalid cells by inverse-distance-weighted valid neighbors.

    Neighbors are gathered by expanding rings of the 4-connected grid
    metric around each invalid cell until at least ``k_neighbors`` valid
    cells (judged on the map's original validity) are collected; the whole
    final ring is kept, so ties share weight. Weights are inverse Euclidean
    center distances. Cells with no valid neighbor within ``max_ring``
    rings fall back to the global mean of valid cells. Filled cells get
    ``a0 = 0``; valid cells are untouched.
    """
    valid = pmap.valid_mask()
    if not valid.any():
        raise InfillError("parameter map holds no valid cell")
    if valid.all():
        return replace(pmap, a=pmap.a.copy(), a0=pmap.a0.copy())

    gh, gw = valid.shape
    a = pmap.a.copy()
    a0 = pmap.a0.copy()
    global_mean = pmap.a[valid].mean(axis=0)
    for r in range(gh):
        for c in range(gw):
            if valid[r, c]:
                continue
            neighbors: list[tuple[float, np.ndarray]] = []
            for ring in range(1, max_ring + 1):
                for dr in range(-ring, ring + 1):
                    dc_abs = ring - abs(dr)
                    for dc in {dc_abs, -dc_abs}:
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < gh and 0 <= cc < gw and valid[rr, cc]:
                            dist = float(np.hypot(dr, dc))
                            neighbors.append((dist, pmap.a[rr, cc]))
                if len(neighbors) >= k_neighbors:
                    break
            if neighbors:
                weights = np.array([1.0 / d for d, _ in neighbors])
                stack = np.stack([v for _, v in neighbors])
                a[r, c] = weights @ stack / weights.sum()
            else:
                a[r, c] = global_mean
            a0[r, c] = 0.0
    return replace(pmap, a=a, a0=a0)


def psfs_from_map(pmap: ParamMap, kernel_side: int,
                  pupil: PupilConfig | None = None) -> np.ndarray:
    """Render the per-cell kernel bank in row-major cell order: (M, K, K)."""
    if not pmap.valid_mask().all():
        raise InfillError("map still holds invalid cells; run infill_invalid first")
    bank = np.empty((pmap.n_cells, kernel_side, kernel_side))
    for r in range(pmap.grid_h):
        for c in range(pmap.grid_w):
            bank[r * pmap.grid_w + c] = render_psf(pmap.cell_params(r, c),
                                                   kernel_side, pupil)
    return bank


def save_param_map(pmap: ParamMap, path) -> None:
    """CSV of cells plus a JSON sidecar holding the model and geometry."""
    path = Path(path)
    n = pmap.model.n_params
    lines = ["row,col,anchor_x,anchor_y,a0," + ",".join(f"a{i+1}" for i in range(n))]
    for r in range(pmap.grid_h):
        for c in range(pmap.grid_w):
            vals = ",".join(f"{v:.17g}" for v in pmap.a[r, c])
            lines.append(f"{r},{c},{pmap.anchors_x[c]},{pmap.anchors_y[r]},"
                         f"{pmap.a0[r, c]:.17g},{vals}")
    path.write_text("\n".join(lines) + "\n")
    header = {
        "model": pmap.model.value,
        "grid_w": pmap.grid_w,
        "grid_h": pmap.grid_h,
        "image_shape": list(pmap.image_shape),
        "patch_w": pmap.cfg.patch_w,
        "patch_h": pmap.cfg.patch_h,
        "stride": pmap.cfg.stride,
        "validity_threshold": pmap.cfg.validity_threshold,
        "ranges": pmap.ranges.to_dict(),
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_param_map(path) -> ParamMap:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    model = PsfModel.parse(header["model"])
    cfg = MapConfig(header["patch_w"], header["patch_h"], header["stride"],
                    header["validity_threshold"])
    gh, gw, n = header["grid_h"], header["grid_w"], model.n_params
    a = np.zeros((gh, gw, n))
    a0 = np.zeros((gh, gw))
    ax = np.zeros(gw, dtype=int)
    ay = np.zeros(gh, dtype=int)
    rows = path.read_text().strip().split("\n")[1:]
    if len(rows) != gh * gw:
        raise SizeError(f"map CSV holds {len(rows)} cells, header says {gh * gw}")
    for row in rows:
        parts = row.split(",")
        r, c = int(parts[0]), int(parts[1])
        ax[c], ay[r] = int(parts[2]), int(parts[3])
        a0[r, c] = float(parts[4])
        a[r, c] = [float(v) for v in parts[5 : 5 + n]]
    return ParamMap(model, a, a0, ax, ay, tuple(header["image_shape"]), cfg,
                    ParamRanges.from_dict(header["ranges"]))


def save_bank_montage(bank: np.ndarray, grid_w: int, path) -> None:
    """Tile a kernel bank into one inspection image (16-bit PNG)."""
    from .io_utils import write_image_normalized

    m, k, _ = bank.shape
    grid_h = (m + grid_w - 1) // grid_w
    tile = np.zeros((grid_h * (k + 2), grid_w * (k + 2)))
    for i in range(m):
        r, c = divmod(i, grid_w)
        cell = bank[i] / (bank[i].max() or 1.0)
        tile[r * (k + 2) + 1 : r * (k + 2) + 1 + k,
             c * (k + 2) + 1 : c * (k + 2) + 1 + k] = cell
    write_image_normalized(path, tile)
