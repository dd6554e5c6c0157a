"""Patch-to-parameters regression: loss, training, scoring, and an oracle.

The regressor maps a standardized image patch to ``N + 1`` outputs: a
validity score squashed into [0, 1] followed by the ``N`` model parameters
in normalized [0, 1] coordinates. Training minimizes a validity-masked
Euclidean loss with Adam; model selection tracks the validation loss per
epoch across a grid of candidate configurations.

``grid_search_estimate`` is a slow reference estimator used to verify the
pipeline on synthetic data where the sharp patch is known: it exhaustively
scores a parameter lattice by reconvolution error.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .degrade import TrainingSet, convolve
from .errors import (
    DomainError,
    ModelMismatchError,
    SizeError,
    TrainingError,
)
from .params import ParamRanges, PsfModel, PsfParams
from .psf_models import PupilConfig, render_psf

STD_FLOOR = 1e-6


def standardize(patch: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance patch normalization (flat patch -> zeros).

    Any positive affine transform of the pixel values maps to the same
    standardized patch, which makes the regressor insensitive to
    illumination level and contrast by construction.
    """
    patch = np.asarray(patch, dtype=np.float64)
    std = patch.std()
    return ((patch - patch.mean()) / max(std, STD_FLOOR)).astype(np.float32)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def loss(pred: np.ndarray, gt_a0: float, gt_a: np.ndarray, gamma: float = 1.0) -> float:
    """Validity-masked squared error for one sample.

    ``pred`` holds the validity estimate (already in [0, 1]) followed by N
    normalized parameter estimates. The parameter term is averaged over 2N
    and gated by ``1 - gt_a0`` so invalid samples train only the validity
    head:

        E = gamma (a0 - p0)^2 + (1 - a0) / (2N) * sum_n (a_n - p_n)^2
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    gt_a = np.asarray(gt_a, dtype=float).reshape(-1)
    n = gt_a.size
    if pred.size != n + 1:
        raise SizeError(f"prediction length {pred.size} != N+1 = {n + 1}")
    e = gamma * (gt_a0 - pred[0]) ** 2
    e += (1.0 - gt_a0) / (2.0 * n) * np.sum((gt_a - pred[1:]) ** 2)
    return float(e)


def _batch_loss_and_grad(raw, a0_t, a_t, gamma):
    """Mean loss over a batch and its gradient w.r.t. the raw outputs.

    ``raw`` is the network output before the validity sigmoid. Gradients of
    the parameter head are exactly zero for samples with ``a0 == 1``.
    """
    B, n = a_t.shape
    p0 = _sigmoid(raw[:, 0].astype(np.float64))
    diff0 = a0_t - p0
    diff = a_t - raw[:, 1:]
    mask = (1.0 - a0_t)[:, None]
    per_sample = gamma * diff0**2 + (mask[:, 0] / (2.0 * n)) * np.sum(diff**2, axis=1)
    total = float(per_sample.mean())
    draw = np.empty_like(raw)
    draw[:, 0] = (-2.0 * gamma * diff0 * p0 * (1.0 - p0)) / B
    draw[:, 1:] = (-mask / n) * diff / B
    return total, draw


@dataclass(frozen=True)
class TrainConfig:
    """One training candidate: optimizer settings plus its init seed."""

    learning_rate: float = 0.003
    epochs: int = 15
    batch_size: int = 32
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1e-4 <= self.learning_rate <= 1e-1:
            raise DomainError("learning_rate outside [1e-4, 1e-1]")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")


@dataclass
class EvalReport:
    """Coefficient-of-determination summary over a labeled set."""

    r2_per_param: np.ndarray
    r2_mean: float
    n_valid: int
    n_total: int


class RegressorModel:
    """A trained regressor plus everything needed to interpret its output."""

    def __init__(
        self,
        model: PsfModel,
        ranges: ParamRanges,
        patch_size: int,
        net: nn.Network,
        train_meta: dict | None = None,
    ):
        self.model = model
        self.ranges = ranges
        self.patch_size = patch_size
        self.net = net
        self.train_meta = train_meta or {}

    def forward(self, patches: np.ndarray) -> np.ndarray:
        """Regress (validity, normalized parameters) from raw patches.

        Accepts one (H, W) patch or a stack (B, H, W); returns (N+1,) or
        (B, N+1). Patches are standardized internally.
        """
        patches = np.asarray(patches, dtype=np.float64)
        single = patches.ndim == 2
        if single:
            patches = patches[None]
        if patches.shape[1] != self.patch_size or patches.shape[2] != self.patch_size:
            raise SizeError(
                f"patch size {patches.shape[1:]} does not match model input "
                f"{self.patch_size}x{self.patch_size}"
            )
        x = np.stack([standardize(p) for p in patches])[..., None]
        raw = self.net.forward(x).astype(np.float64)
        out = np.concatenate([_sigmoid(raw[:, :1]), raw[:, 1:]], axis=1)
        # a perfectly flat patch carries no texture at all: flag it invalid
        # outright (training data only ever contains noisy flats)
        flat = np.array([p.std() <= STD_FLOOR for p in patches])
        out[flat, 0] = 1.0
        return out[0] if single else out

    def predict_params(self, patch: np.ndarray) -> PsfParams:
        """Regress and denormalize a single patch into physical units."""
        out = self.forward(patch)
        return self.ranges.denormalize(self.model, out[1:], a0=float(out[0]))


def prepare_arrays(ts: TrainingSet, ranges: ParamRanges):
    """Standardized patches and normalized targets as flat arrays."""
    X = np.stack([standardize(s.patch) for s in ts.samples])[..., None]
    a0 = np.array([s.params.a0 for s in ts.samples], dtype=np.float64)
    an = np.stack([
        ranges.normalize(s.params) if s.params.a0 < 0.5 else np.zeros(s.params.model.n_params)
        for s in ts.samples
    ]).astype(np.float64)
    return X, a0, an


def _epoch_loss(net, X, a0, an, gamma, batch_size=256):
    total, count = 0.0, 0
    for i in range(0, X.shape[0], batch_size):
        raw = net.forward(X[i : i + batch_size]).astype(np.float64)
        l, _ = _batch_loss_and_grad(raw, a0[i : i + batch_size], an[i : i + batch_size], gamma)
        total += l * (min(i + batch_size, X.shape[0]) - i)
        count += min(i + batch_size, X.shape[0]) - i
    return total / count


def train(
    dataset: TrainingSet,
    valid_set: TrainingSet,
    configs: list[TrainConfig] | TrainConfig,
    *,
    ranges: ParamRanges | None = None,
    arch: dict | None = None,
    verbose: bool = False,
) -> RegressorModel:
    """Fit the regressor; return the best (config, epoch) weights.

    Every candidate config trains with Adam from its own seeded
    initialization; after each epoch the validation loss decides whether to
    snapshot the weights. A candidate whose loss turns non-finite is
    abandoned; if all candidates diverge a TrainingError is raised.
    """
    if isinstance(configs, TrainConfig):
        configs = [configs]
    if not dataset.samples or not valid_set.samples:
        raise TrainingError("empty dataset")
    model = dataset.samples[0].params.model
    if any(s.params.model is not model for s in valid_set.samples):
        raise ModelMismatchError("train and validation sets use different PSF models")
    ranges = ranges or ParamRanges.from_dict(dataset.manifest.get("ranges", {}))
    patch_size = dataset.samples[0].patch.shape[0]
    arch = dict(arch or {})

    X, a0, an = prepare_arrays(dataset, ranges)
    Xv, a0v, anv = prepare_arrays(valid_set, ranges)
    n_out = model.n_params + 1

    best = None  # (val_loss, weights, cfg, epoch)
    curve: list[dict] = []
    for ci, cfg in enumerate(configs):
        net = nn.build_regressor_net(n_out, seed=cfg.seed, **arch)
        opt = nn.Adam(net, lr=cfg.learning_rate)
        order_rng = np.random.default_rng(cfg.seed + 1)
        diverged = False
        for epoch in range(cfg.epochs):
            idx = order_rng.permutation(X.shape[0])
            running = 0.0
            for i in range(0, idx.size, cfg.batch_size):
                sel = idx[i : i + cfg.batch_size]
                raw = net.forward(X[sel]).astype(np.float64)
                batch_loss, draw = _batch_loss_and_grad(raw, a0[sel], an[sel], cfg.gamma)
                if not np.isfinite(batch_loss):
                    diverged = True
                    break
                net.backward(draw.astype(X.dtype))
                opt.step()
                running += batch_loss * sel.size
            if diverged:
                break
            train_loss = running / idx.size
            val_loss = _epoch_loss(net, Xv, a0v, anv, cfg.gamma)
            curve.append({"config": ci, "epoch": epoch, "train_loss": train_loss,
                          "val_loss": val_loss})
            if verbose:
                print(f"[cfg {ci} lr={cfg.learning_rate}] epoch {epoch}: "
                      f"train {train_loss:.5f}  val {val_loss:.5f}")
            if np.isfinite(val_loss) and (best is None or val_loss < best[0]):
                best = (val_loss, net.get_weights(), cfg, epoch)
    if best is None:
        raise TrainingError("all training candidates diverged")

    val_loss, weights, cfg, epoch = best
    net = nn.build_regressor_net(n_out, seed=cfg.seed, **arch)
    net.set_weights(weights)
    meta = {
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "best_epoch": epoch,
        "batch_size": cfg.batch_size,
        "gamma": cfg.gamma,
        "seed": cfg.seed,
        "val_loss": val_loss,
        "curve": curve,
        "arch": arch,
    }
    return RegressorModel(model, ranges, patch_size, net, meta)


def r2_score(preds: np.ndarray, gts: np.ndarray, gt_a0: np.ndarray | None = None) -> EvalReport:
    """Per-parameter coefficient of determination over textured samples.

    ``R2_n = 1 - sum (a_n - p_n)^2 / sum (a_n - mean a_n)^2`` computed over
    the samples whose ground truth validity flag is 0, then averaged over
    the parameters.
    """
    preds = np.asarray(preds, dtype=float)
    gts = np.asarray(gts, dtype=float)
    if preds.shape != gts.shape:
        raise SizeError("prediction and ground-truth shapes differ")
    n_total = gts.shape[0]
    if gt_a0 is None:
        gt_a0 = np.zeros(n_total)
    keep = np.asarray(gt_a0) < 0.5
    preds, gts = preds[keep], gts[keep]
    if gts.shape[0] < 2:
        raise DomainError("need at least 2 valid samples")
    ss_tot = np.sum((gts - gts.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise DomainError("ground truth variance is zero for some parameter")
    ss_res = np.sum((gts - preds) ** 2, axis=0)
    r2 = 1.0 - ss_res / ss_tot
    return EvalReport(r2, float(r2.mean()), int(gts.shape[0]), int(n_total))


def evaluate(model: RegressorModel, test_set: TrainingSet, batch_size: int = 256) -> EvalReport:
    """Run the regressor over a labeled set and score it."""
    patches = np.stack([s.patch for s in test_set.samples])
    outs = []
    for i in range(0, patches.shape[0], batch_size):
        outs.append(model.forward(patches[i : i + batch_size]))
    out = np.concatenate(outs, axis=0)
    gts = np.stack([model.ranges.normalize(s.params) if s.params.a0 < 0.5
                    else np.zeros(model.model.n_params)
                    for s in test_set.samples])
    gt_a0 = np.array([s.params.a0 for s in test_set.samples])
    return r2_score(out[:, 1:], gts, gt_a0)


def param_lattice(model: PsfModel, ranges: ParamRanges, steps: int | list[int]) -> list[PsfParams]:
    """Cartesian lattice of parameter vectors inside the configured ranges."""
    bounds = ranges.for_model(model)
    if isinstance(steps, int):
        steps = [steps] * bounds.shape[0]
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, steps)]
    names = model.param_names
    for i, name in enumerate(names):
        if name == "axis":
            axes[i] = np.clip(axes[i], 1e-6, np.pi - 1e-6)
    grids = np.meshgrid(*axes, indexing="ij")
    vectors = np.stack([g.ravel() for g in grids], axis=1)
    return [PsfParams(model, v) for v in vectors]


def grid_search_estimate(
    patch_blurred: np.ndarray,
    patch_sharp: np.ndarray,
    candidates: list[PsfParams],
    kernel_side: int,
    pupil: PupilConfig | None = None,
    kernels: list[np.ndarray] | None = None,
) -> PsfParams:
    """Reference estimator: pick the lattice point whose reconvolution of
    the sharp patch best explains the blurred patch (least squares).

    Pass precomputed ``kernels`` to amortize rendering across many patches.
    """
    if not candidates:
        raise DomainError("empty parameter lattice")
    if kernels is None:
        kernels = [render_psf(p, kernel_side, pupil) for p in candidates]
    best_idx, best_err = 0, np.inf
    for i, kernel in enumerate(kernels):
        err = float(np.sum((convolve(patch_sharp, kernel) - patch_blurred) ** 2))
        if err < best_err:
            best_idx, best_err = i, err
    return candidates[best_idx]


_MODEL_MAGIC = b"SVPM"


def save_model(model: RegressorModel, path) -> None:
    """JSON header + little-endian float32 weight blob with CRC32."""
    weights = model.net.get_weights()
    blob = b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in weights)
    meta = {k: v for k, v in model.train_meta.items() if k != "curve"}
    header = {
        "format": "svpsf-regressor-v1",
        "psf_model": model.model.value,
        "ranges": model.ranges.to_dict(),
        "patch_size": model.patch_size,
        "std_floor": STD_FLOOR,
        "arch": model.train_meta.get("arch", {}),
        "seed": model.train_meta.get("seed", 0),
        "shapes": [list(w.shape) for w in weights],
        "weight_count": int(sum(w.size for w in weights)),
        "weight_bytes": len(blob),
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "train_meta": meta,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(blob)


def load_model(path) -> RegressorModel:
    """Read a model written by :func:`save_model`, verifying integrity."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise DomainError("not a svpsf regressor file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    if len(blob) != header["weight_bytes"]:
        raise SizeError(f"weight blob is {len(blob)} bytes, header says {header['weight_bytes']}")
    if (zlib.crc32(blob) & 0xFFFFFFFF) != header["crc32"]:
        raise DomainError("weight blob checksum mismatch")

    model = PsfModel.parse(header["psf_model"])
    net = nn.build_regressor_net(model.n_params + 1, seed=header.get("seed", 0),
                                 **header.get("arch", {}))
    flat = np.frombuffer(blob, dtype="<f4")
    weights, offset = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        weights.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise SizeError("weight blob does not match declared shapes")
    net.set_weights(weights)
    return RegressorModel(
        model,
        ParamRanges.from_dict(header["ranges"]),
        int(header["patch_size"]),
        net,
        dict(header.get("train_meta", {}), arch=header.get("arch", {}),
             seed=header.get("seed", 0)),
    )
