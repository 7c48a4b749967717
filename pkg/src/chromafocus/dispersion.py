"""Refractive-index models and paraxial ball-lens formulas.

Wavelengths are in nanometres throughout; Cauchy and Sellmeier coefficients
follow the usual datasheet convention of micrometres (B in um^2, C in um^2).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import AtFocalPlane, ConfigError, DegenerateLens, OutOfRange

__all__ = [
    "DispersionModel",
    "Constant",
    "Cauchy",
    "Sellmeier",
    "TabulatedLinearInterp",
    "BallLensSpec",
    "refractive_index",
    "efl_bfl",
    "image_distance_and_magnification",
    "longitudinal_chromatic_shift",
    "model_from_dict",
    "PRESETS",
    "N_BK7",
    "SYNTHETIC_CORE",
    "SYNTHETIC_OUTER",
    "SYNTHETIC_MEDIUM",
]

WIDE_RANGE = (100.0, 10000.0)


@dataclass(frozen=True)
class DispersionModel:
    valid_range: Tuple[float, float] = WIDE_RANGE

    def __call__(self, wavelength_nm):
        lam = np.asarray(wavelength_nm, dtype=float)
        lo, hi = self.valid_range
        if np.any(lam < lo) or np.any(lam > hi) or np.any(~np.isfinite(lam)):
            raise OutOfRange(
                f"wavelength {wavelength_nm} nm outside valid range [{lo}, {hi}] nm"
            )
        n = self._evaluate(lam)
        return float(n) if n.ndim == 0 else n

    def _evaluate(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(DispersionModel):
    n: float = 1.0

    def _evaluate(self, lam):
        return np.full_like(lam, self.n)

    def to_dict(self):
        return {"kind": "constant", "n": self.n, "valid_range": list(self.valid_range)}


@dataclass(frozen=True)
class Cauchy(DispersionModel):
    """Two-term Cauchy law ``n = A + B / lambda^2`` with B in um^2."""

    A: float = 1.5
    B: float = 0.0

    def _evaluate(self, lam):
        lam_um = lam * 1e-3
        return self.A + self.B / lam_um**2

    def to_dict(self):
        return {
            "kind": "cauchy",
            "A": self.A,
            "B": self.B,
            "valid_range": list(self.valid_range),
        }


@dataclass(frozen=True)
class Sellmeier(DispersionModel):
    """Three-term Sellmeier equation, C coefficients in um^2."""

    B: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    C: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def _evaluate(self, lam):
        l2 = (lam * 1e-3) ** 2
        n2 = 1.0
        for b, c in zip(self.B, self.C):
            n2 = n2 + b * l2 / (l2 - c)
        return np.sqrt(n2)

    def to_dict(self):
        return {
            "kind": "sellmeier",
            "B": list(self.B),
            "C": list(self.C),
            "valid_range": list(self.valid_range),
        }


@dataclass(frozen=True)
class TabulatedLinearInterp(DispersionModel):
    """Piecewise-linear interpolation through ``(wavelength_nm, n)`` pairs.

    The valid range is the span of the table unless given explicitly.
    """

    points: Tuple[Tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        if len(pts) < 2:
            raise ConfigError("tabulated dispersion needs at least two points", "points")
        lams = [p[0] for p in pts]
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError("tabulated wavelengths must be strictly increasing", "points")
        object.__setattr__(self, "points", pts)
        if self.valid_range == WIDE_RANGE:
            object.__setattr__(self, "valid_range", (lams[0], lams[-1]))

    def _evaluate(self, lam):
        table = np.asarray(self.points)
        return np.interp(lam, table[:, 0], table[:, 1])

    def to_dict(self):
        return {
            "kind": "tabulated",
            "points": [list(p) for p in self.points],
            "valid_range": list(self.valid_range),
        }


def model_from_dict(d) -> DispersionModel:
    """Build a model from a config mapping, a preset name or a bare number."""
    if isinstance(d, str):
        try:
            return PRESETS[d]
        except KeyError:
            raise ConfigError(f"unknown dispersion preset {d!r}", "dispersion") from None
    if isinstance(d, (int, float)):
        return Constant(n=float(d))
    d = dict(d)
    kind = d.pop("kind", None)
    vr = d.pop("valid_range", None)
    extra = {} if vr is None else {"valid_range": (float(vr[0]), float(vr[1]))}
    try:
        if kind == "constant":
            model = Constant(n=float(d.pop("n")), **extra)
        elif kind == "cauchy":
            model = Cauchy(A=float(d.pop("A")), B=float(d.pop("B")), **extra)
        elif kind == "sellmeier":
            model = Sellmeier(B=tuple(d.pop("B")), C=tuple(d.pop("C")), **extra)
        elif kind == "tabulated":
            model = TabulatedLinearInterp(points=tuple(map(tuple, d.pop("points"))), **extra)
        elif kind == "preset":
            model = model_from_dict(str(d.pop("name")))
        else:
            raise ConfigError(f"unknown dispersion kind {kind!r}", "dispersion")
    except KeyError as exc:
        raise ConfigError(f"dispersion model missing field {exc}", "dispersion") from None
    if d:
        raise ConfigError(f"unknown dispersion keys {sorted(d)}", "dispersion")
    return model


def refractive_index(model: DispersionModel, wavelength_nm):
    return model(wavelength_nm)


# Schott datasheet coefficients for N-BK7; K9 is the equivalent Chinese grade.
N_BK7 = Sellmeier(
    B=(1.03961212, 0.231792344, 1.01046945),
    C=(0.00600069867, 0.0200179144, 103.560653),
    valid_range=(300.0, 2500.0),
)

# Synthetic GRIN curves (Cauchy-shaped, 25 nm steps). Plausible values only,
# not recovered from any measurement.
SYNTHETIC_CORE = TabulatedLinearInterp(points=(
    (400, 1.52), (425, 1.51696), (450, 1.5144), (475, 1.51224), (500, 1.5104),
    (525, 1.50881), (550, 1.50744), (575, 1.50624), (600, 1.50519),
    (625, 1.50426), (650, 1.50343), (675, 1.5027), (700, 1.50204),
    (725, 1.50145), (750, 1.50092), (775, 1.50044), (800, 1.5),
))
SYNTHETIC_OUTER = TabulatedLinearInterp(points=(
    (400, 1.38), (425, 1.37696), (450, 1.3744), (475, 1.37224), (500, 1.3704),
    (525, 1.36881), (550, 1.36744), (575, 1.36624), (600, 1.36519),
    (625, 1.36426), (650, 1.36343), (675, 1.3627), (700, 1.36204),
    (725, 1.36145), (750, 1.36092), (775, 1.36044), (800, 1.36),
))
SYNTHETIC_MEDIUM = TabulatedLinearInterp(points=(
    (400, 1.343), (425, 1.34117), (450, 1.33964), (475, 1.33835), (500, 1.33724),
    (525, 1.33629), (550, 1.33546), (575, 1.33474), (600, 1.33411),
    (625, 1.33355), (650, 1.33306), (675, 1.33262), (700, 1.33222),
    (725, 1.33187), (750, 1.33155), (775, 1.33126), (800, 1.331),
))

AIR = Constant(n=1.0)

PRESETS = {
    "n-bk7": N_BK7,
    "k9": N_BK7,
    "air": AIR,
    "synthetic-core": SYNTHETIC_CORE,
    "synthetic-outer": SYNTHETIC_OUTER,
    "synthetic-medium": SYNTHETIC_MEDIUM,
}


@dataclass(frozen=True)
class BallLensSpec:
    diameter: float = 100.0
    material: DispersionModel = N_BK7

    def __post_init__(self):
        if not self.diameter > 0:
            raise ConfigError("ball lens diameter must be positive", "diameter")


def efl_bfl(lens: BallLensSpec, wavelength_nm: float) -> Tuple[float, float]:
    """Paraxial effective and back focal lengths of a ball lens in air.

    EFL is measured from the lens centre, BFL from the rear surface. A
    negative BFL (focus inside the glass) is returned unchanged.
    """
    n = lens.material(wavelength_nm)
    if not n > 1.0:
        raise DegenerateLens(f"refractive index {n} <= 1 has no real focus")
    efl = n * lens.diameter / (4.0 * (n - 1.0))
    return efl, efl - lens.diameter / 2.0


def image_distance_and_magnification(
    lens: BallLensSpec, wavelength_nm: float, object_distance: float
) -> Tuple[float, float]:
    if not object_distance > 0:
        raise ConfigError("object distance must be positive", "object_distance")
    efl, _ = efl_bfl(lens, wavelength_nm)
    if abs(object_distance - efl) < 1e-9 * efl:
        raise AtFocalPlane("object sits on the focal plane; image at infinity")
    d_i = 1.0 / (1.0 / efl - 1.0 / object_distance)
    return d_i, -d_i / object_distance


def longitudinal_chromatic_shift(
    lens: BallLensSpec, wavelength1_nm: float, wavelength2_nm: float
) -> float:
    """BFL(wavelength2) - BFL(wavelength1) in mm."""
    return efl_bfl(lens, wavelength2_nm)[1] - efl_bfl(lens, wavelength1_nm)[1]

