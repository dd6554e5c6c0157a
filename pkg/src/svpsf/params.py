"""PSF model identifiers, parameter vectors, and parameter ranges.

Five parametric blur models are supported. Zernike models describe the
pupil phase of the optical system (defocus, astigmatism power, astigmatism
axis); Gaussian models describe the intensity kernel directly (per-axis
variance in pixels squared).

Every parameter vector carries a validity flag ``a0`` in [0, 1]: 0 means
the parameters were estimated from textured content, 1 means the patch was
untextured and the parameters are meaningless.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ModelMismatchError


class PsfModel(enum.Enum):
    """Parametric PSF families and their free-parameter count."""

    ZERNIKE1 = "z1"  # defocus
    ZERNIKE2 = "z2"  # cylinder, axis
    ZERNIKE3 = "z3"  # defocus, cylinder, axis
    GAUSSIAN1 = "g1"  # variance (isotropic)
    GAUSSIAN2 = "g2"  # variance x, variance y

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @property
    def is_zernike(self) -> bool:
        return self in (PsfModel.ZERNIKE1, PsfModel.ZERNIKE2, PsfModel.ZERNIKE3)

    @property
    def is_gaussian(self) -> bool:
        return not self.is_zernike

    @classmethod
    def parse(cls, name: str) -> "PsfModel":
        key = name.strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "z1": cls.ZERNIKE1, "zernike1": cls.ZERNIKE1,
            "z2": cls.ZERNIKE2, "zernike2": cls.ZERNIKE2,
            "z3": cls.ZERNIKE3, "zernike3": cls.ZERNIKE3,
            "g1": cls.GAUSSIAN1, "gaussian1": cls.GAUSSIAN1,
            "g2": cls.GAUSSIAN2, "gaussian2": cls.GAUSSIAN2,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ModelMismatchError(f"unknown PSF model {name!r}") from None


_PARAM_NAMES = {
    PsfModel.ZERNIKE1: ("defocus",),
    PsfModel.ZERNIKE2: ("cylinder", "axis"),
    PsfModel.ZERNIKE3: ("defocus", "cylinder", "axis"),
    PsfModel.GAUSSIAN1: ("variance",),
    PsfModel.GAUSSIAN2: ("variance_x", "variance_y"),
}


@dataclass
class PsfParams:
    """A model identifier, its parameter vector, and the validity flag.

    Parameters are stored in physical units: radians of pupil phase for the
    Zernike coefficients, radians in (0, pi) for the astigmatism axis, and
    pixels squared for Gaussian variances.
    """

    model: PsfModel
    a: np.ndarray
    a0: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        if self.a.size != self.model.n_params:
            raise ModelMismatchError(
                f"{self.model.value} expects {self.model.n_params} parameters, "
                f"got {self.a.size}"
            )

    def validate(self) -> None:
        """Raise DomainError when a parameter is outside its valid domain."""
        if not np.all(np.isfinite(self.a)) or not np.isfinite(self.a0):
            raise DomainError("parameters must be finite")
        if not 0.0 <= self.a0 <= 1.0:
            raise DomainError(f"validity flag a0={self.a0} outside [0, 1]")
        if self.model.is_gaussian and np.any(self.a <= 0.0):
            raise DomainError("Gaussian variances must be positive")
        if self.model.is_zernike:
            axis = self.axis
            if axis is not None and not 0.0 < axis < np.pi:
                raise DomainError(f"astigmatism axis {axis} outside (0, pi)")

    # Named accessors over the per-model parameter layout. Missing terms
    # read as 0 (they contribute nothing to the pupil phase).
    @property
    def defocus(self) -> float:
        if self.model is PsfModel.ZERNIKE1 or self.model is PsfModel.ZERNIKE3:
            return float(self.a[0])
        return 0.0

    @property
    def cylinder(self) -> float:
        if self.model is PsfModel.ZERNIKE2:
            return float(self.a[0])
        if self.model is PsfModel.ZERNIKE3:
            return float(self.a[1])
        return 0.0

    @property
    def axis(self) -> float | None:
        if self.model is PsfModel.ZERNIKE2:
            return float(self.a[1])
        if self.model is PsfModel.ZERNIKE3:
            return float(self.a[2])
        return None


def _default_bounds(model: PsfModel) -> tuple[tuple[float, float], ...]:
    defocus = (0.0, 6.0)      # radians of pupil phase
    cylinder = (0.0, 3.0)     # radians of pupil phase
    axis = (0.0, np.pi)       # open interval; draws stay strictly inside
    variance = (0.5, 16.0)    # px^2
    return {
        PsfModel.ZERNIKE1: (defocus,),
        PsfModel.ZERNIKE2: (cylinder, axis),
        PsfModel.ZERNIKE3: (defocus, cylinder, axis),
        PsfModel.GAUSSIAN1: (variance,),
        PsfModel.GAUSSIAN2: (variance, variance),
    }[model]


@dataclass
class ParamRanges:
    """Physical parameter intervals, one (lo, hi) pair per model parameter.

    The same ranges are used to draw training parameters uniformly, to map
    between physical values and the normalized [0, 1] coordinates used by
    the regressor, and they are serialized with every trained model.
    """

    bounds: dict[PsfModel, tuple[tuple[float, float], ...]] = field(
        default_factory=lambda: {m: _default_bounds(m) for m in PsfModel}
    )

    def for_model(self, model: PsfModel) -> np.ndarray:
        b = np.asarray(self.bounds[model], dtype=float)
        if b.shape != (model.n_params, 2):
            raise DomainError(f"ranges for {model.value} must be ({model.n_params}, 2)")
        return b

    def normalize(self, params: PsfParams) -> np.ndarray:
        """Map a physical parameter vector onto [0, 1] per coordinate."""
        b = self.for_model(params.model)
        return (params.a - b[:, 0]) / (b[:, 1] - b[:, 0])

    def denormalize(self, model: PsfModel, u, a0: float = 0.0) -> PsfParams:
        """Invert :meth:`normalize`; values outside [0, 1] extrapolate."""
        b = self.for_model(model)
        u = np.asarray(u, dtype=float).reshape(-1)
        a = b[:, 0] + u * (b[:, 1] - b[:, 0])
        if model.is_zernike:
            names = model.param_names
            for i, name in enumerate(names):
                if name == "axis":
                    a[i] = float(np.clip(a[i], 1e-9, np.pi - 1e-9))
        if model.is_gaussian:
            a = np.maximum(a, 1e-4)
        return PsfParams(model, a, a0=a0)

    def draw(self, model: PsfModel, rng: np.random.Generator) -> PsfParams:
        """Draw a parameter vector uniformly inside the configured ranges."""
        b = self.for_model(model)
        u = rng.uniform(b[:, 0], b[:, 1])
        names = model.param_names
        for i, name in enumerate(names):
            if name == "axis":
                u[i] = float(np.clip(u[i], 1e-9, np.pi - 1e-9))
        return PsfParams(model, u, a0=0.0)

    def to_dict(self) -> dict:
        return {m.value: [list(pair) for pair in self.bounds[m]] for m in self.bounds}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamRanges":
        bounds = {
            PsfModel.parse(k): tuple(tuple(float(x) for x in pair) for pair in v)
            for k, v in d.items()
        }
        full = {m: _default_bounds(m) for m in PsfModel}
        full.update(bounds)
        return cls(bounds=full)


def default_ranges() -> ParamRanges:
    return ParamRanges()
