"""Binary pupil masks evaluated where rays meet the lens sphere.

Angles are in degrees. A mask is evaluated in the *pupil frame*: its third
axis points from the sphere centre toward the source, the first axis is the
projection of world +x onto the pupil plane (world +y when the source sits on
the x axis), and azimuth is measured from the first axis toward the second.
A point's polar angle is its angular distance from the source axis, so the
source-facing hemisphere is ``polar <= 90``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ConfigError

__all__ = [
    "PupilMask",
    "FullAperture",
    "CircularHole",
    "Annulus",
    "OffAxisSlit",
    "PolylineBand",
    "W_PUPIL",
    "pupil_frame",
    "to_pupil_frame",
    "transmits",
    "open_fraction",
    "mask_from_dict",
]

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def pupil_frame(source_axis) -> np.ndarray:
    """Rows are the pupil-frame basis vectors expressed in world coordinates."""
    a = np.asarray(source_axis, dtype=float)
    a = a / np.linalg.norm(a)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(a @ ref) > 1.0 - 1e-9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ a) * a
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return np.stack([e1, e2, a])


def to_pupil_frame(points, source_axis) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float)) @ pupil_frame(source_axis).T


def _unit_from_angles(azimuth_deg, polar_deg):
    az, po = np.radians(azimuth_deg), np.radians(polar_deg)
    return np.stack(
        [np.sin(po) * np.cos(az), np.sin(po) * np.sin(az), np.cos(po)], axis=-1
    )


def _angle_between(p, q):
    # atan2 form keeps precision for tiny angles
    cross = np.linalg.norm(np.cross(p, q), axis=-1)
    return np.degrees(np.arctan2(cross, np.sum(p * q, axis=-1)))


@dataclass(frozen=True)
class PupilMask:
    def transmits(self, entry_points, source_axis) -> np.ndarray:
        """Boolean transmission for each row of ``entry_points`` (unit vectors)."""
        local = to_pupil_frame(entry_points, source_axis)
        front = local[:, 2] >= 0.0
        return front & self._inside(local)

    def _inside(self, local: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class FullAperture(PupilMask):
    def _inside(self, local):
        return np.ones(len(local), dtype=bool)

    def to_dict(self):
        return {"shape": "full"}


@dataclass(frozen=True)
class CircularHole(PupilMask):
    half_angle: float = 90.0
    center_axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def _inside(self, local):
        c = np.asarray(self.center_axis, dtype=float)
        c = c / np.linalg.norm(c)
        return _angle_between(local, c[None, :]) <= self.half_angle

    def to_dict(self):
        return {
            "shape": "circular",
            "half_angle": self.half_angle,
            "center_axis": list(self.center_axis),
        }


@dataclass(frozen=True)
class Annulus(PupilMask):
    inner_half_angle: float = 0.0
    outer_half_angle: float = 90.0

    def __post_init__(self):
        if not 0.0 <= self.inner_half_angle <= self.outer_half_angle:
            raise ConfigError("annulus needs 0 <= inner <= outer", "pupil")

    def _inside(self, local):
        theta = _angle_between(local, np.array([[0.0, 0.0, 1.0]]))
        return (theta >= self.inner_half_angle) & (theta <= self.outer_half_angle)

    def to_dict(self):
        return {
            "shape": "annulus",
            "inner_half_angle": self.inner_half_angle,
            "outer_half_angle": self.outer_half_angle,
        }


@dataclass(frozen=True)
class OffAxisSlit(PupilMask):
    """Straight band of angular width ``width_angle``.

    The band's centre line is the great circle through the pupil axis along
    azimuth ``orientation``, displaced sideways by ``offset_angle``.
    """

    width_angle: float = 10.0
    offset_angle: float = 0.0
    orientation: float = 0.0

    def _inside(self, local):
        o = np.radians(self.orientation)
        normal = np.array([-np.sin(o), np.cos(o), 0.0])
        across = np.degrees(np.arcsin(np.clip(local @ normal, -1.0, 1.0)))
        return np.abs(across - self.offset_angle) <= self.width_angle / 2.0

    def to_dict(self):
        return {
            "shape": "slit",
            "width_angle": self.width_angle,
            "offset_angle": self.offset_angle,
            "orientation": self.orientation,
        }


@dataclass(frozen=True)
class PolylineBand(PupilMask):
    """Band of full width ``band_width`` around a chain of great-circle arcs.

    ``vertices`` are ``(azimuth, polar)`` pairs in the pupil frame.
    """

    vertices: Tuple[Tuple[float, float], ...] = field(default=())
    band_width: float = 10.0

    def __post_init__(self):
        verts = tuple((float(a), float(p)) for a, p in self.vertices)
        if len(verts) < 2:
            raise ConfigError("polyline band needs at least two vertices", "pupil.vertices")
        object.__setattr__(self, "vertices", verts)

    def _inside(self, local):
        v = _unit_from_angles(*np.asarray(self.vertices).T)
        best = np.full(len(local), np.inf)
        for a, b in zip(v[:-1], v[1:]):
            best = np.minimum(best, _arc_distance(local, a, b))
        return best <= self.band_width / 2.0

    def to_dict(self):
        return {
            "shape": "polyline",
            "vertices": [list(v) for v in self.vertices],
            "band_width": self.band_width,
        }


def _arc_distance(p, a, b):
    """Angular distance (deg) from points ``p`` to the minor great-circle arc a-b."""
    n = np.cross(a, b)
    nn = np.linalg.norm(n)
    end_dist = np.minimum(_angle_between(p, a[None]), _angle_between(p, b[None]))
    if nn < 1e-12:
        return end_dist
    n = n / nn
    # the foot of the perpendicular lies on the arc iff p sits between the
    # planes spanned by (n, a) and (n, b)
    within = (np.cross(a, p) @ n >= 0.0) & (np.cross(p, b) @ n >= 0.0)
    line_dist = np.degrees(np.abs(np.arcsin(np.clip(p @ n, -1.0, 1.0))))
    return np.where(within, line_dist, end_dist)


def _w_vertices():
    # W drawn in angular (x, y) pupil coordinates, converted to (azimuth, polar)
    xy = np.array([[-45.0, 25.0], [-25.0, -20.0], [0.0, 10.0], [25.0, -20.0], [45.0, 25.0]])
    return tuple(
        (float(np.degrees(np.arctan2(y, x))), float(np.hypot(x, y))) for x, y in xy
    )


# Approximate W-shaped cuttlefish-style pupil; geometry is illustrative only.
W_PUPIL = PolylineBand(vertices=_w_vertices(), band_width=12.0)


def transmits(mask: PupilMask, entry_point, source_axis):
    """Scalar/vector convenience wrapper around :meth:`PupilMask.transmits`."""
    pts = np.asarray(entry_point, dtype=float)
    out = mask.transmits(np.atleast_2d(pts), source_axis)
    return bool(out[0]) if pts.ndim == 1 else out


def open_fraction(mask: PupilMask, n_samples: int = 100_000) -> float:
    """Transmitted fraction of the source-facing hemisphere's solid angle.

    Uses a Fibonacci lattice, which is equal-area and fully deterministic.
    """
    if n_samples < 1000:
        raise ConfigError("open_fraction needs at least 1000 samples", "n_samples")
    i = np.arange(n_samples)
    cos_t = 1.0 - (i + 0.5) / n_samples
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = i * GOLDEN_ANGLE
    pts = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    return float(np.mean(mask._inside(pts)))


def mask_from_dict(d) -> PupilMask:
    if d is None or d == "full":
        return FullAperture()
    if d == "w":
        return W_PUPIL
    d = dict(d)
    shape = d.pop("shape", None)
    try:
        if shape == "full":
            mask = FullAperture()
        elif shape == "circular":
            mask = CircularHole(
                half_angle=float(d.pop("half_angle")),
                center_axis=tuple(d.pop("center_axis", (0.0, 0.0, 1.0))),
            )
        elif shape == "annulus":
            mask = Annulus(float(d.pop("inner_half_angle")), float(d.pop("outer_half_angle")))
        elif shape == "slit":
            mask = OffAxisSlit(
                float(d.pop("width_angle")),
                float(d.pop("offset_angle", 0.0)),
                float(d.pop("orientation", 0.0)),
            )
        elif shape == "polyline":
            mask = PolylineBand(
                vertices=tuple(map(tuple, d.pop("vertices"))),
                band_width=float(d.pop("band_width")),
            )
        elif shape == "w":
            mask = W_PUPIL
        else:
            raise ConfigError(f"unknown pupil shape {shape!r}", "pupil.shape")
    except KeyError as exc:
        raise ConfigError(f"pupil missing field {exc}", "pupil") from None
    if d:
        raise ConfigError(f"unknown pupil keys {sorted(d)}", "pupil")
    return mask
