"""Ray casting through a graded-index sphere.

World frame: the sphere is centred at the origin and all lengths are in mm.
Rays are emitted from a point source, tested against the pupil where they
first meet the sphere, refracted into the outer shell, marched through the
radial index profile with explicit Euler steps and refracted back into the
medium when they cross the surface again.

The inner march runs in a numba kernel over a contiguous block of rays.
Every ray is independent, so splitting the block across worker threads and
concatenating in block order gives bit-identical output for any thread
count.
"""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numba
import numpy as np

from .dispersion import AIR, Constant, DispersionModel
from .errors import ConfigError, OutOfSphere, TotalInternalReflection
from .pupil import FullAperture, PupilMask, pupil_frame

__all__ = [
    "RayStatus",
    "GrinSphere",
    "Ray",
    "TraceConfig",
    "TraceResult",
    "grin_index",
    "grin_gradient",
    "refract",
    "step_inside",
    "emit_directions",
    "trace_rays",
    "trace_point_source",
    "axial_crossings",
]

BISECTION_TOL = 1e-9


class RayStatus(enum.IntEnum):
    PROPAGATING = 0
    BLOCKED = 1
    TOTALLY_REFLECTED = 2
    ESCAPED = 3
    EXITED = 4
    LANDED = 5


@dataclass(frozen=True)
class GrinSphere:
    """Sphere whose index falls from ``n_core`` at the centre to ``n_outer``
    at the surface, immersed in ``n_medium``."""

    radius: float
    n_core: DispersionModel
    n_outer: DispersionModel
    n_medium: DispersionModel = AIR

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError("sphere radius must be positive", "sphere.radius")

    @classmethod
    def homogeneous(cls, radius, material, medium=AIR):
        if isinstance(material, (int, float)):
            material = Constant(n=float(material))
        return cls(radius, material, material, medium)

    def indices(self, wavelength_nm) -> Tuple[float, float, float]:
        return (
            self.n_core(wavelength_nm),
            self.n_outer(wavelength_nm),
            self.n_medium(wavelength_nm),
        )

    def describe(self) -> dict:
        return {
            "radius_mm": self.radius,
            "n_core": self.n_core.to_dict(),
            "n_outer": self.n_outer.to_dict(),
            "n_medium": self.n_medium.to_dict(),
        }


def grin_index(sphere: GrinSphere, r, wavelength_nm):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > sphere.radius):
        raise OutOfSphere(f"radius {r} outside [0, {sphere.radius}]")
    nc, no, _ = sphere.indices(wavelength_nm)
    n = nc / (1.0 + (nc / no - 1.0) * r**2 / sphere.radius**2)
    return float(n) if n.ndim == 0 else n


def grin_gradient(sphere: GrinSphere, X, wavelength_nm) -> np.ndarray:
    """Analytic gradient of the index profile at point(s) ``X`` (mm^-1)."""
    X = np.asarray(X, dtype=float)
    R = sphere.radius
    r2 = np.sum(X * X, axis=-1, keepdims=True)
    if np.any(r2 >= R * R):
        raise OutOfSphere("gradient requested on or outside the sphere surface")
    nc, no, _ = sphere.indices(wavelength_nm)
    k = nc / no - 1.0
    q = 1.0 + k * r2 / R**2
    return -2.0 * nc * k * X / (R**2 * q**2)


def refract(e0, normal, n_from, n_to) -> np.ndarray:
    """Vector Snell refraction of unit direction ``e0`` at a surface.

    ``normal`` may point either way; it is flipped to face the incoming ray.
    Raises :class:`TotalInternalReflection` beyond the critical angle.
    """
    e0 = np.asarray(e0, dtype=float)
    nrm = np.asarray(normal, dtype=float)
    cos_i = -float(e0 @ nrm)
    if cos_i < 0:
        nrm, cos_i = -nrm, -cos_i
    eta = n_from / n_to
    sin2_r = eta * eta * max(0.0, 1.0 - cos_i * cos_i)
    if sin2_r > 1.0:
        raise TotalInternalReflection(f"sin(theta_r) = {math.sqrt(sin2_r):.4f} > 1")
    cos_r = math.sqrt(1.0 - sin2_r)
    e1 = eta * e0 + (eta * cos_i - cos_r) * nrm
    return e1 / np.linalg.norm(e1)


@dataclass
class Ray:
    position: np.ndarray
    direction: np.ndarray
    status: RayStatus = RayStatus.PROPAGATING


def step_inside(sphere: GrinSphere, ray: Ray, wavelength_nm, ds: float) -> Ray:
    """One Euler step; the boundary crossing is the caller's job."""
    x = ray.position + ray.direction * ds
    nc, no, _ = sphere.indices(wavelength_nm)
    k = nc / no - 1.0
    R2 = sphere.radius**2
    r2 = float(x @ x)
    e = ray.direction + (-2.0 * k * x / (R2 * (1.0 + k * r2 / R2))) * ds
    return Ray(x, e / np.linalg.norm(e), ray.status)


# -- numba march -------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _refract_inplace(e, nx, ny, nz, eta):
    # nx..nz face the incoming ray; returns False on total internal reflection
    cos_i = -(e[0] * nx + e[1] * ny + e[2] * nz)
    sin2_r = eta * eta * max(0.0, 1.0 - cos_i * cos_i)
    if sin2_r > 1.0:
        return False
    cos_r = math.sqrt(1.0 - sin2_r)
    f = eta * cos_i - cos_r
    e0 = eta * e[0] + f * nx
    e1 = eta * e[1] + f * ny
    e2 = eta * e[2] + f * nz
    norm = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
    e[0] = e0 / norm
    e[1] = e1 / norm
    e[2] = e2 / norm
    return True


@numba.njit(cache=True, nogil=True)
def _march_block(pos, dirs, R, k, eta_in, eta_out, ds, max_steps, out_pos, out_dir, status):
    R2 = R * R
    e = np.empty(3)
    for i in range(pos.shape[0]):
        x0, x1, x2 = pos[i, 0], pos[i, 1], pos[i, 2]
        e[0], e[1], e[2] = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        rr = math.sqrt(x0 * x0 + x1 * x1 + x2 * x2)
        if not _refract_inplace(e, x0 / rr, x1 / rr, x2 / rr, eta_in):
            status[i] = 2
            continue
        exited = False
        first = True
        for _ in range(max_steps):
            y0 = x0 + e[0] * ds
            y1 = x1 + e[1] * ds
            y2 = x2 + e[2] * ds
            if y0 * y0 + y1 * y1 + y2 * y2 >= R2:
                if first:
                    # chord shorter than one step: straight line to the far side
                    s = -2.0 * (x0 * e[0] + x1 * e[1] + x2 * e[2])
                    s = min(max(s, 0.0), ds)
                else:
                    lo, hi = 0.0, ds
                    while hi - lo > 1e-9:
                        mid = 0.5 * (lo + hi)
                        m0 = x0 + e[0] * mid
                        m1 = x1 + e[1] * mid
                        m2 = x2 + e[2] * mid
                        if m0 * m0 + m1 * m1 + m2 * m2 < R2:
                            lo = mid
                        else:
                            hi = mid
                    s = 0.5 * (lo + hi)
                x0 = x0 + e[0] * s
                x1 = x1 + e[1] * s
                x2 = x2 + e[2] * s
                exited = True
                break
            x0, x1, x2 = y0, y1, y2
            r2 = y0 * y0 + y1 * y1 + y2 * y2
            g = -2.0 * k / (R2 * (1.0 + k * r2 / R2)) * ds
            e0 = e[0] + g * x0
            e1 = e[1] + g * x1
            e2 = e[2] + g * x2
            norm = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            e[0] = e0 / norm
            e[1] = e1 / norm
            e[2] = e2 / norm
            first = False
        if not exited:
            status[i] = 3
            continue
        rr = math.sqrt(x0 * x0 + x1 * x1 + x2 * x2)
        out_pos[i, 0], out_pos[i, 1], out_pos[i, 2] = x0, x1, x2
        if not _refract_inplace(e, -x0 / rr, -x1 / rr, -x2 / rr, eta_out):
            status[i] = 2
            continue
        out_dir[i, 0], out_dir[i, 1], out_dir[i, 2] = e[0], e[1], e[2]
        status[i] = 4


def _march(entry, dirs, R, nc, no, nm, ds, threads):
    n = len(entry)
    out_pos = np.zeros((n, 3))
    out_dir = np.zeros((n, 3))
    status = np.zeros(n, dtype=np.int8)
    if n == 0:
        return out_pos, out_dir, status
    k = nc / no - 1.0
    max_steps = int(200 * R / ds) + 10
    args = (R, k, nm / no, no / nm, ds, max_steps)
    threads = max(1, int(threads))
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)

    def run(j):
        sl = slice(bounds[j], bounds[j + 1])
        _march_block(entry[sl], dirs[sl], *args, out_pos[sl], out_dir[sl], status[sl])

    if len(bounds) == 2:
        run(0)
    else:
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
            list(pool.map(run, range(len(bounds) - 1)))
    return out_pos, out_dir, status


# -- emission & driver -------------------------------------------------------


@dataclass(frozen=True)
class TraceConfig:
    """Emission and integration settings.

    ``ds`` defaults to ``R / 1000`` of the traced sphere. ``half_angle``
    (degrees) defaults to the cone that just covers the sphere as seen from
    the source. ``emission`` is ``"fibonacci"`` or ``"grid"``; the grid uses
    ``n_per_axis`` points per axis and ignores ``n_rays``.
    """

    n_rays: int = 100_000
    ds: Optional[float] = None
    source_position: Tuple[float, float, float] = (0.0, 0.0, -1e9)
    emission: str = "fibonacci"
    half_angle: Optional[float] = None
    n_per_axis: int = 101
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1, compare=False)

    def __post_init__(self):
        if self.emission not in ("fibonacci", "grid"):
            raise ConfigError(f"unknown emission scheme {self.emission!r}", "trace.emission")
        if self.n_rays < 1:
            raise ConfigError("n_rays must be at least 1", "trace.n_rays")
        if self.ds is not None and not self.ds > 0:
            raise ConfigError("ds must be positive", "trace.ds")

    def summary(self) -> dict:
        return {
            "n_rays": self.n_rays,
            "ds_mm": self.ds,
            "source_position_mm": list(self.source_position),
            "emission": self.emission,
            "half_angle_deg": self.half_angle,
            "n_per_axis": self.n_per_axis,
            "seed": self.seed,
        }


@dataclass
class TraceResult:
    """Rays that left the sphere toward the retina side.

    ``ray_index`` maps each exit ray back to its position in the emission
    sequence; ``counts`` holds the per-status ray accounting.
    """

    exit_points: np.ndarray
    exit_directions: np.ndarray
    entry_points: np.ndarray
    ray_index: np.ndarray
    counts: dict
    metadata: dict

    def __len__(self):
        return len(self.exit_points)


def emit_directions(cfg: TraceConfig, axis, half_angle_rad: float) -> np.ndarray:
    """Unit emission directions filling a cone around ``axis``."""
    frame = pupil_frame(axis)
    u, v, a = frame[0], frame[1], frame[2]
    rng = np.random.default_rng(cfg.seed)
    phase, shift = rng.random(2)
    if cfg.emission == "fibonacci":
        n = cfg.n_rays
        frac = np.mod((np.arange(n) + 0.5) / n + shift, 1.0)
        # equal solid angle per ray: sin(alpha/2) scales with sqrt(frac)
        alpha = 2.0 * np.arcsin(np.sqrt(frac) * np.sin(half_angle_rad / 2.0))
        phi = 2.0 * np.pi * phase + np.arange(n) * (np.pi * (3.0 - np.sqrt(5.0)))
    else:
        m = cfg.n_per_axis
        t = np.tan(half_angle_rad) * np.linspace(-1.0, 1.0, m)
        gx, gy = np.meshgrid(t, t, indexing="xy")
        gx, gy = gx.ravel(), gy.ravel()
        keep = np.hypot(gx, gy) <= np.tan(half_angle_rad) * (1 + 1e-12)
        gx, gy = gx[keep], gy[keep]
        alpha = np.arctan(np.hypot(gx, gy))
        phi = np.arctan2(gy, gx)
    sa, ca = np.sin(alpha), np.cos(alpha)
    d = (
        ca[:, None] * a[None, :]
        + (sa * np.cos(phi))[:, None] * u[None, :]
        + (sa * np.sin(phi))[:, None] * v[None, :]
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _intersect_sphere(origins, dirs, R):
    """Near-side hit distance along each ray, NaN on a miss."""
    t_ca = -np.sum(origins * dirs, axis=1)
    closest = origins + t_ca[:, None] * dirs
    h2 = np.sum(closest * closest, axis=1)
    with np.errstate(invalid="ignore"):
        t = t_ca - np.sqrt(R * R - h2)
    t[(h2 > R * R) | (t_ca < 0)] = np.nan
    return t


def trace_rays(
    sphere: GrinSphere,
    origins,
    directions,
    wavelength_nm: float,
    ds: Optional[float] = None,
    mask: PupilMask = FullAperture(),
    source_axis=None,
    threads: int = 1,
):
    """Trace arbitrary rays starting outside the sphere.

    Returns ``(status, entry_points, exit_points, exit_directions)`` with one
    row per input ray; rows are meaningful only where the status says so.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(origins, dirs.shape)
    R = sphere.radius
    ds = R / 1000.0 if ds is None else float(ds)
    if ds > R / 100.0:
        raise ConfigError(f"ds = {ds} mm exceeds R/100 = {R / 100.0} mm", "trace.ds")
    nc, no, nm = sphere.indices(wavelength_nm)

    n = len(dirs)
    status = np.full(n, int(RayStatus.ESCAPED), dtype=np.int8)
    entry = np.full((n, 3), np.nan)
    exit_pos = np.full((n, 3), np.nan)
    exit_dir = np.full((n, 3), np.nan)

    t = _intersect_sphere(origins, dirs, R)
    hit = ~np.isnan(t)
    entry[hit] = origins[hit] + t[hit, None] * dirs[hit]
    # snap onto the surface to remove rounding from long source distances
    entry[hit] *= R / np.linalg.norm(entry[hit], axis=1, keepdims=True)

    if isinstance(mask, FullAperture):
        # a ray arriving from outside always meets the hemisphere facing it
        passes = hit.copy()
    elif source_axis is None:
        raise ConfigError("a non-trivial pupil needs the source axis", "pupil")
    else:
        passes = np.zeros(n, dtype=bool)
        passes[hit] = mask.transmits(entry[hit] / R, source_axis)
    status[hit & ~passes] = RayStatus.BLOCKED

    go = np.flatnonzero(hit & passes)
    p, d, st = _march(
        np.ascontiguousarray(entry[go]), np.ascontiguousarray(dirs[go]), R, nc, no, nm, ds, threads
    )
    status[go] = st
    exit_pos[go] = p
    exit_dir[go] = d
    bad = status != RayStatus.EXITED
    exit_pos[bad] = np.nan
    exit_dir[bad] = np.nan
    return status, entry, exit_pos, exit_dir


def trace_point_source(
    sphere: GrinSphere,
    mask: PupilMask,
    cfg: TraceConfig,
    wavelength_nm: float,
) -> TraceResult:
    R = sphere.radius
    src = np.asarray(cfg.source_position, dtype=float)
    dist = float(np.linalg.norm(src))
    if dist <= R:
        raise ConfigError("point source must lie outside the sphere", "trace.source_position")
    source_axis = src / dist
    subtend = math.asin(R / dist)
    half = subtend if cfg.half_angle is None else math.radians(cfg.half_angle)
    if not 0 < half < math.pi / 2:
        raise ConfigError("emission half angle must be in (0, 90) degrees", "trace.half_angle")
    dirs = emit_directions(cfg, -source_axis, half)
    status, entry, exit_pos, exit_dir = trace_rays(
        sphere, src[None, :], dirs, wavelength_nm, cfg.ds, mask, source_axis, cfg.threads
    )
    # exit rays heading back toward the source side never reach the retina
    if np.all(np.isnan(entry[:, 0])):
        raise ConfigError("emission cone misses the sphere entirely", "trace.half_angle")
    with np.errstate(invalid="ignore"):
        back = (status == RayStatus.EXITED) & (exit_dir @ source_axis >= 0.0)
    status[back] = RayStatus.ESCAPED
    keep = np.flatnonzero(status == RayStatus.EXITED)

    counts = {
        "emitted": int(len(dirs)),
        "blocked": int(np.sum(status == RayStatus.BLOCKED)),
        "totally_reflected": int(np.sum(status == RayStatus.TOTALLY_REFLECTED)),
        "escaped": int(np.sum(status == RayStatus.ESCAPED)),
        "exited": int(len(keep)),
    }
    ds = R / 1000.0 if cfg.ds is None else cfg.ds
    meta = dict(cfg.summary(), ds_mm=ds, half_angle_deg=math.degrees(half))
    meta.update(wavelength_nm=float(wavelength_nm), counts=counts)
    return TraceResult(
        exit_points=exit_pos[keep],
        exit_directions=exit_dir[keep],
        entry_points=entry[keep],
        ray_index=keep,
        counts=counts,
        metadata=meta,
    )


def axial_crossings(result: TraceResult, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Signed distance along ``axis`` (from the sphere centre) at which each
    exit ray passes closest to the optical axis line through the origin."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    p, d = result.exit_points, result.exit_directions
    p_perp = p - np.outer(p @ a, a)
    d_perp = d - np.outer(d @ a, a)
    dd = np.sum(d_perp * d_perp, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = -np.sum(p_perp * d_perp, axis=1) / dd
    return p @ a + t * (d @ a)


def with_threads(cfg: TraceConfig, threads: int) -> TraceConfig:
    return replace(cfg, threads=threads)
