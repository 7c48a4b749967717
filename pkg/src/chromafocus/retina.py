"""Hemispherical retina accumulation, focal sweeps and the intensity stack.

A retina is a hemisphere of radius ``radius`` centred on the lens centre and
facing along ``axis``. Hits are binned on an equal-angle (theta, phi) raster:
theta is the polar angle from the retina axis, phi the azimuth in the frame
given by :func:`chromafocus.pupil.pupil_frame`. Row index is the theta bin,
column index the phi bin.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigError,
    InsufficientDistances,
    ParseError,
    WavelengthNotInStack,
)
from .pupil import PupilMask, pupil_frame
from .tracer import GrinSphere, TraceConfig, TraceResult, trace_point_source

__all__ = [
    "RetinaGrid",
    "IntensityStack",
    "accumulate",
    "image_point",
    "sweep",
    "peak_profile",
    "composite_planes",
    "radial_log_gradient",
    "encircled_energy_radius",
    "write_stack",
    "read_stack",
    "peak_profiles_csv",
]

STACK_MAGIC = b"CPHSTK01"


@dataclass(frozen=True)
class RetinaGrid:
    """Angular pixel raster on a hemispherical retina.

    ``projection="equidistant"`` (default) lays a square raster over the
    angular coordinates ``(theta*cos(phi), theta*sin(phi))`` spanning
    ``[-max_polar, max_polar]`` on both axes; the retina axis falls in pixel
    ``(n_rows // 2, n_cols // 2)``. ``projection="equirectangular"`` bins
    theta over ``[0, max_polar]`` along rows and phi over ``[-180, 180)``
    along columns, so the axis lands in row 0.
    """

    radius: float = 100.0
    n_rows: int = 256
    n_cols: int = 256
    max_polar: float = 90.0
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    projection: str = "equidistant"

    def __post_init__(self):
        if self.n_rows < 8 or self.n_cols < 8:
            raise ConfigError("retina grid needs at least 8x8 bins", "retina.bins")
        if not 0.0 < self.max_polar <= 90.0:
            raise ConfigError("max polar angle must be in (0, 90]", "retina.max_polar")
        if not self.radius > 0:
            raise ConfigError("retina radius must be positive", "retina.radius")
        if self.projection not in ("equidistant", "equirectangular"):
            raise ConfigError(f"unknown projection {self.projection!r}", "retina.projection")

    def bin_index(self, theta_deg, phi_rad):
        """(row, col) bin of each direction; rows are -1 outside the raster."""
        if self.projection == "equirectangular":
            row = np.floor(theta_deg / self.max_polar * self.n_rows).astype(np.int64)
            row[theta_deg == self.max_polar] = self.n_rows - 1
            col = np.floor((phi_rad + np.pi) / (2 * np.pi) * self.n_cols).astype(np.int64)
            col = np.clip(col, 0, self.n_cols - 1)
            bad = (row >= self.n_rows) | ~np.isfinite(theta_deg)
        else:
            ax = theta_deg * np.cos(phi_rad)
            ay = theta_deg * np.sin(phi_rad)
            span = 2.0 * self.max_polar
            col = np.floor((ax + self.max_polar) / span * self.n_cols).astype(np.int64)
            row = np.floor((ay + self.max_polar) / span * self.n_rows).astype(np.int64)
            bad = (
                (theta_deg > self.max_polar)
                | (col < 0) | (col >= self.n_cols) | (row < 0) | (row >= self.n_rows)
                | ~np.isfinite(theta_deg)
            )
        row[bad] = -1
        return row, col

    def pixel_polar(self) -> Tuple[np.ndarray, np.ndarray]:
        """Polar angle (deg) and azimuth (deg) at every pixel centre."""
        if self.projection == "equirectangular":
            theta = (np.arange(self.n_rows) + 0.5) * self.max_polar / self.n_rows
            phi = -180.0 + (np.arange(self.n_cols) + 0.5) * 360.0 / self.n_cols
            return np.meshgrid(theta, phi, indexing="ij")
        span = 2.0 * self.max_polar
        ay = -self.max_polar + (np.arange(self.n_rows) + 0.5) * span / self.n_rows
        ax = -self.max_polar + (np.arange(self.n_cols) + 0.5) * span / self.n_cols
        gy, gx = np.meshgrid(ay, ax, indexing="ij")
        return np.hypot(gx, gy), np.degrees(np.arctan2(gy, gx))

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "max_polar_deg": self.max_polar,
            "axis": list(self.axis),
            "projection": self.projection,
        }


def _bin_hits(points, dirs, grid: RetinaGrid):
    """Flat bin index per ray, -1 where the ray misses the raster."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    pd = np.sum(points * dirs, axis=1)
    pp = np.sum(points * points, axis=1)
    t = -pd + np.sqrt(pd * pd - pp + grid.radius**2)
    hit = points + t[:, None] * dirs
    local = hit @ pupil_frame(grid.axis).T
    theta = np.degrees(np.arctan2(np.hypot(local[:, 0], local[:, 1]), local[:, 2]))
    phi = np.arctan2(local[:, 1], local[:, 0])
    row, col = grid.bin_index(theta, phi)
    return np.where(row >= 0, row * grid.n_cols + col, -1)


def image_point(grid: RetinaGrid, source_position) -> Tuple[float, float]:
    """Continuous (row, col) raster coordinates of a source's chief ray.

    The chief ray passes undeviated through the sphere centre, so its image
    lies opposite the source. Pixel ``i`` spans ``[i, i + 1)``.
    """
    d = -np.asarray(source_position, dtype=float)
    local = pupil_frame(grid.axis) @ (d / np.linalg.norm(d))
    theta = np.degrees(np.arctan2(np.hypot(local[0], local[1]), local[2]))
    phi = np.arctan2(local[1], local[0])
    if grid.projection == "equirectangular":
        return (
            theta / grid.max_polar * grid.n_rows,
            (phi + np.pi) / (2 * np.pi) * grid.n_cols,
        )
    span = 2.0 * grid.max_polar
    return (
        (theta * np.sin(phi) + grid.max_polar) / span * grid.n_rows,
        (theta * np.cos(phi) + grid.max_polar) / span * grid.n_cols,
    )


def accumulate(exit_rays, grid: RetinaGrid, sphere_radius: Optional[float] = None):
    """Count exit rays per retina bin.

    ``exit_rays`` is a :class:`TraceResult` or a ``(points, directions)``
    pair. Returns ``(plane, missed)`` where ``plane`` is a ``uint32`` array of
    shape ``(n_rows, n_cols)``.
    """
    if isinstance(exit_rays, TraceResult):
        pts, dirs = exit_rays.exit_points, exit_rays.exit_directions
    else:
        pts, dirs = (np.atleast_2d(np.asarray(a, dtype=float)) for a in exit_rays)
        pts = pts.reshape(-1, 3)
        dirs = dirs.reshape(-1, 3)
    if sphere_radius is not None and grid.radius <= sphere_radius:
        raise ConfigError("retina must lie outside the lens sphere", "retina.distances")
    idx = _bin_hits(pts, dirs, grid)
    good = idx >= 0
    plane = np.bincount(idx[good], minlength=grid.n_rows * grid.n_cols)
    plane = plane.astype(np.uint32).reshape(grid.n_rows, grid.n_cols)
    return plane, int(np.sum(~good))


@dataclass
class IntensityStack:
    """Retina count maps indexed ``[wavelength, distance, theta, phi]``."""

    wavelengths: np.ndarray
    distances: np.ndarray
    planes: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        self.distances = np.asarray(self.distances, dtype=float)
        self.planes = np.asarray(self.planes, dtype=np.uint32)
        if self.planes.shape[:2] != (len(self.wavelengths), len(self.distances)):
            raise ValueError("planes shape does not match wavelength/distance axes")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if np.any(np.diff(self.distances) <= 0):
            raise ValueError("retina distances must be strictly increasing")

    @property
    def shape(self):
        return self.planes.shape

    def wavelength_index(self, wavelength_nm: float) -> int:
        hits = np.flatnonzero(np.isclose(self.wavelengths, wavelength_nm, rtol=0, atol=1e-6))
        if len(hits) == 0:
            raise WavelengthNotInStack(f"{wavelength_nm} nm not in stack {self.wavelengths}")
        return int(hits[0])

    def grid(self) -> RetinaGrid:
        g = self.metadata.get("grid", {})
        return RetinaGrid(
            radius=float(self.distances[0]),
            n_rows=self.planes.shape[2],
            n_cols=self.planes.shape[3],
            max_polar=float(g.get("max_polar_deg", 90.0)),
            axis=tuple(g.get("axis", (0.0, 0.0, 1.0))),
            projection=g.get("projection", "equidistant"),
        )

    def __eq__(self, other):
        if not isinstance(other, IntensityStack):
            return NotImplemented
        return (
            np.array_equal(self.wavelengths, other.wavelengths)
            and np.array_equal(self.distances, other.distances)
            and np.array_equal(self.planes, other.planes)
            and self.metadata == other.metadata
        )


def sweep(
    sphere: GrinSphere,
    mask: PupilMask,
    cfg: TraceConfig,
    wavelengths: Sequence[float],
    distances: Sequence[float],
    grid: RetinaGrid = RetinaGrid(),
    traces: Optional[list] = None,
) -> IntensityStack:
    """Trace each wavelength once and accumulate it on every retina distance.

    Exit rays propagate in a straight line, so one trace serves all
    distances. Pass ``traces`` to reuse precomputed :class:`TraceResult`
    objects (one per wavelength).
    """
    wavelengths = np.asarray(wavelengths, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if len(wavelengths) == 0 or len(distances) == 0:
        raise ConfigError("sweep needs at least one wavelength and one distance", "sweep")
    if np.any(np.diff(wavelengths) <= 0) or np.any(np.diff(distances) <= 0):
        raise ConfigError("sweep lists must be strictly increasing", "sweep")
    if distances[0] <= sphere.radius:
        raise ConfigError("retina distances must exceed the sphere radius", "sweep.distances")
    planes = np.zeros(
        (len(wavelengths), len(distances), grid.n_rows, grid.n_cols), dtype=np.uint32
    )
    missed = np.zeros((len(wavelengths), len(distances)), dtype=np.int64)
    counts = []
    for i, lam in enumerate(wavelengths):
        tr = traces[i] if traces is not None else trace_point_source(sphere, mask, cfg, lam)
        counts.append(tr.counts)
        for j, d in enumerate(distances):
            planes[i, j], missed[i, j] = accumulate(tr, replace(grid, radius=float(d)))
    meta = {
        "trace": {k: v for k, v in tr.metadata.items() if k not in ("counts", "wavelength_nm")},
        "ray_counts": counts,
        "missed": missed.tolist(),
        "pupil": mask.to_dict(),
        "sphere": sphere.describe(),
        "grid": grid.to_dict(),
    }
    return IntensityStack(wavelengths, distances, planes, meta)


def peak_profile(stack: IntensityStack, wavelength_nm: float, normalize: bool = False):
    """Per-distance maximum bin count for one wavelength.

    Returns ``(distances, peaks)``; with ``normalize`` the peaks are divided
    by their maximum (an all-zero profile stays zero).
    """
    i = stack.wavelength_index(wavelength_nm)
    peaks = stack.planes[i].reshape(len(stack.distances), -1).max(axis=1).astype(float)
    if normalize and peaks.max() > 0:
        peaks = peaks / peaks.max()
    return stack.distances.copy(), peaks


def composite_planes(stack: IntensityStack, spectrum) -> np.ndarray:
    """Incoherent sum of per-wavelength planes.

    ``spectrum`` is a single wavelength or a ``{wavelength: weight}`` mapping.
    Returns float planes of shape ``(n_dist, n_rows, n_cols)``.
    """
    if np.isscalar(spectrum):
        spectrum = {float(spectrum): 1.0}
    out = np.zeros(stack.planes.shape[1:], dtype=float)
    for lam, w in spectrum.items():
        out += w * stack.planes[stack.wavelength_index(lam)]
    return out


def radial_log_gradient(
    stack: IntensityStack,
    spectrum,
    eps: float = 1.0,
    azimuth_slice: Optional[Tuple[float, float]] = None,
    n_radial: Optional[int] = None,
    max_radius: Optional[float] = None,
) -> np.ndarray:
    """Distance derivative of the azimuthally reduced log-intensity map.

    The log is taken per pixel, averaged over pixels sharing a polar-angle
    bin (optionally only those whose azimuth lies in ``azimuth_slice``
    degrees), then differentiated along the retina-distance axis. Radial
    bins split ``[0, max_radius]`` degrees (default: the whole raster).
    Returns an ``(n_dist, n_radial)`` array in log-units per mm.
    """
    if len(stack.distances) < 2:
        raise InsufficientDistances("need at least two retina distances")
    grid = stack.grid()
    logmap = np.log(composite_planes(stack, spectrum) + eps)
    theta, phi = grid.pixel_polar()
    extent = grid.max_polar if max_radius is None else float(max_radius)
    if not 0.0 < extent <= grid.max_polar:
        raise ConfigError(f"max_radius must be in (0, {grid.max_polar}] degrees", "spectrum.max_radius")
    if n_radial is None:
        full = grid.n_rows if grid.projection == "equirectangular" else grid.n_rows // 2
        n_radial = max(1, int(round(full * extent / grid.max_polar)))
    rbin = np.floor(theta / extent * n_radial).astype(np.int64)
    use = rbin < n_radial
    if azimuth_slice is not None:
        lo, hi = azimuth_slice
        use &= (phi >= lo) & (phi <= hi)
        if not np.any(use):
            raise ConfigError("azimuth slice selects no pixels", "spectrum.azimuth_slice")
    idx = rbin[use]
    counts = np.bincount(idx, minlength=n_radial)
    flat = logmap[:, use]
    radial = np.stack([np.bincount(idx, weights=row, minlength=n_radial) for row in flat])
    with np.errstate(invalid="ignore", divide="ignore"):
        radial = np.where(counts > 0, radial / np.maximum(counts, 1), 0.0)
    return np.gradient(radial, stack.distances, axis=0)


def encircled_energy_radius(stack: IntensityStack, spectrum, fraction: float = 0.5) -> float:
    """Polar angle (deg) enclosing ``fraction`` of the composite's counts,
    summed over every retina distance."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("energy fraction must be in (0, 1]", "fraction")
    total = composite_planes(stack, spectrum).sum(axis=0)
    theta, _ = stack.grid().pixel_polar()
    order = np.argsort(theta, axis=None, kind="stable")
    cum = np.cumsum(total.ravel()[order])
    if cum[-1] <= 0:
        raise ConfigError("composite has no counts", "spectrum")
    k = int(np.searchsorted(cum, fraction * cum[-1]))
    return float(theta.ravel()[order][k])


# -- file formats ------------------------------------------------------------


def write_stack(stack: IntensityStack, path) -> None:
    n_l, n_d, n_t, n_p = stack.planes.shape
    meta = json.dumps(stack.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<4I", n_l, n_d, n_t, n_p))
        fh.write(np.asarray(stack.wavelengths, dtype="<f8").tobytes())
        fh.write(np.asarray(stack.distances, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(stack.planes, dtype="<u4").tobytes())


def read_stack(path) -> IntensityStack:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != STACK_MAGIC:
        raise ParseError(f"{path}: bad magic at offset 0, expected {STACK_MAGIC!r}")
    off = 8
    try:
        n_l, n_d, n_t, n_p = struct.unpack_from("<4I", data, off)
        off += 16
        lams = np.frombuffer(data, "<f8", n_l, off).astype(float)
        off += 8 * n_l
        dists = np.frombuffer(data, "<f8", n_d, off).astype(float)
        off += 8 * n_d
        (mlen,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off : off + mlen].decode("utf-8"))
        off += mlen
        count = n_l * n_d * n_t * n_p
        planes = np.frombuffer(data, "<u4", count, off).reshape(n_l, n_d, n_t, n_p)
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated or corrupt stack near offset {off}: {exc}") from None
    if off + 4 * count != len(data):
        raise ParseError(f"{path}: {len(data) - off - 4 * count} trailing bytes at offset {off + 4 * count}")
    return IntensityStack(lams, dists, planes.astype(np.uint32), meta)


def peak_profiles_csv(stack: IntensityStack) -> str:
    """CSV text with columns ``lambda_nm,distance_mm,peak,total``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda_nm", "distance_mm", "peak", "total"])
    flat = stack.planes.reshape(stack.planes.shape[0], stack.planes.shape[1], -1)
    for i, lam in enumerate(stack.wavelengths):
        for j, d in enumerate(stack.distances):
            w.writerow([repr(float(lam)), repr(float(d)), int(flat[i, j].max()), int(flat[i, j].sum(dtype=np.int64))])
    return buf.getvalue()
