"""Colour-from-focus segmentation of event streams.

For each calibrated focal plane the events recorded while the actuator
dwells there are motion-compensated (linear contrast maximisation), turned
into a count image, scored with a sliding-window variance map and split by
Otsu's threshold. Events that land in the sharp regions take that plane's
label.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    ConfigError,
    DegenerateHistogram,
    EmptyPlaneWarning,
    NoCalibration,
    WindowTooLarge,
)
from .events import write_events_csv

__all__ = [
    "FocalCalibrationMap",
    "CMaxResult",
    "SegmentationResult",
    "accumulate_event_image",
    "cmax_linear",
    "velocity_grid",
    "sharpness_map",
    "otsu_threshold",
    "window_mask",
    "segment_sweep",
    "labeled_events_csv",
    "write_pgm",
    "FocusSegmenter",
]

UNLABELED = -1


@dataclass(frozen=True)
class FocalCalibrationMap:
    """Actuator positions (mm) of best focus for each labelled wavelength."""

    labels: Tuple[str, ...]
    wavelengths: Tuple[float, ...]
    positions: Tuple[float, ...]
    visit_order: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        n = len(self.labels)
        if n == 0:
            raise NoCalibration("calibration map has no entries")
        if len(self.wavelengths) != n or len(self.positions) != n:
            raise ConfigError("calibration fields differ in length", "calibration")
        if len(set(self.labels)) != n:
            raise ConfigError("calibration labels must be unique", "calibration.labels")
        if len(set(self.positions)) != n:
            raise ConfigError("calibration positions must be distinct", "calibration.positions")
        order = tuple(range(n)) if self.visit_order is None else tuple(self.visit_order)
        if sorted(order) != list(range(n)):
            raise ConfigError("visit order must be a permutation of the entries", "calibration.visit_order")
        object.__setattr__(self, "visit_order", order)

    @classmethod
    def from_entries(cls, entries, visit_order=None):
        labels, lams, pos = zip(*entries) if entries else ((), (), ())
        return cls(tuple(labels), tuple(map(float, lams)), tuple(map(float, pos)), visit_order)

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"label": l, "wavelength": w, "position": p}
                for l, w, p in zip(self.labels, self.wavelengths, self.positions)
            ],
            "visit_order": list(self.visit_order),
        }


def accumulate_event_image(events, shape) -> np.ndarray:
    """Polarity-agnostic per-pixel event counts."""
    img = np.zeros(shape, dtype=np.int64)
    if len(events):
        np.add.at(img, (events["y"].astype(np.intp), events["x"].astype(np.intp)), 1)
    return img


def velocity_grid(limit: float = 100.0, n: int = 21) -> np.ndarray:
    """Square grid of candidate (vx, vy) velocities in px/s."""
    v = np.linspace(-limit, limit, n)
    vx, vy = np.meshgrid(v, v, indexing="xy")
    return np.stack([vx.ravel(), vy.ravel()], axis=1)


@dataclass(frozen=True)
class CMaxResult:
    velocity: Tuple[float, float]
    image: np.ndarray
    objective: float
    t_ref: float


def _warp(events, v, t_ref):
    dt = (events["t"].astype(np.float64) - t_ref) * 1e-6
    return events["x"] - v[0] * dt, events["y"] - v[1] * dt


def _vote(xw, yw, shape):
    rows, cols = shape
    x0, y0 = np.floor(xw), np.floor(yw)
    fx, fy = xw - x0, yw - y0
    x0, y0 = x0.astype(np.intp), y0.astype(np.intp)
    img = np.zeros(rows * cols, dtype=np.float64)
    for dx, dy, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < cols) & (yi >= 0) & (yi < rows)
        img += np.bincount(yi[ok] * cols + xi[ok], weights=w[ok], minlength=rows * cols)
    return img.reshape(shape)


def cmax_linear(events, shape, velocities=None, t_ref=None) -> CMaxResult:
    """Exhaustive linear-motion contrast maximisation.

    Events are warped to ``t_ref`` (default: the earliest timestamp) and
    bilinearly voted into an image; the candidate whose image has the
    largest variance wins. Ties go to the slowest candidate. A stream with
    fewer than two distinct timestamps returns the identity warp.
    """
    velocities = velocity_grid() if velocities is None else np.asarray(velocities, dtype=float)
    if len(events) == 0:
        return CMaxResult((0.0, 0.0), np.zeros(shape), 0.0, 0.0)
    t_ref = float(events["t"].min()) if t_ref is None else float(t_ref)
    if events["t"].min() == events["t"].max():
        img = _vote(*_warp(events, (0.0, 0.0), t_ref), shape)
        return CMaxResult((0.0, 0.0), img, float(img.var()), t_ref)
    scores = np.array([_vote(*_warp(events, v, t_ref), shape).var() for v in velocities])
    best = scores.max()
    tied = np.flatnonzero(scores >= best * (1 - 1e-12))
    speed = np.hypot(velocities[tied, 0], velocities[tied, 1])
    k = tied[np.argmin(speed)]
    v = (float(velocities[k, 0]), float(velocities[k, 1]))
    return CMaxResult(v, _vote(*_warp(events, v, t_ref), shape), float(scores[k]), t_ref)


def sharpness_map(image, window: int = 30) -> np.ndarray:
    """Population variance of every ``window`` x ``window`` patch (valid region)."""
    img = np.asarray(image)
    rows, cols = img.shape
    if window < 1:
        raise ConfigError("window must be >= 1", "segment.window")
    if window > rows or window > cols:
        raise WindowTooLarge(f"window {window} exceeds image {rows}x{cols}")
    exact = np.issubdtype(img.dtype, np.integer)
    a = img.astype(np.int64 if exact else np.float64)

    def box(x):
        s = np.zeros((rows + 1, cols + 1), dtype=x.dtype)
        s[1:, 1:] = x.cumsum(0).cumsum(1)
        return s[window:, window:] - s[:-window, window:] - s[window:, :-window] + s[:-window, :-window]

    n = window * window
    s1, s2 = box(a), box(a * a)
    if exact:
        # integer arithmetic keeps the variance exact for count images
        return (n * s2 - s1 * s1) / float(n * n)
    return np.maximum(s2 / n - (s1 / n) ** 2, 0.0)


def otsu_threshold(values, nbins: int = 256) -> float:
    """Otsu's threshold over a ``nbins`` histogram of the value range.

    Returns the lower edge of the first foreground bin; values ``>=`` the
    threshold are foreground. Ties pick the lowest threshold.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if len(v) == 0 or v.min() == v.max():
        raise DegenerateHistogram("need at least two distinct values")
    hist, edges = np.histogram(v, bins=nbins, range=(v.min(), v.max()))
    centres = 0.5 * (edges[1:] + edges[:-1])
    p = hist / hist.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centres)[:-1]
    mt = (p * centres).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def window_mask(above: np.ndarray, window: int, shape) -> np.ndarray:
    """Pixels covered by at least one above-threshold window."""
    rows, cols = shape
    pad = np.zeros((rows + window, cols + window), dtype=np.int64)
    pad[window : window + above.shape[0], window : window + above.shape[1]] = above
    s = np.zeros((rows + window + 1, cols + window + 1), dtype=np.int64)
    s[1:, 1:] = pad.cumsum(0).cumsum(1)
    # window origin (i, j) covers pixels i..i+w-1; pixel r gets origins r-w+1..r
    r = np.arange(rows) + 1
    c = np.arange(cols) + 1
    tot = (
        s[np.ix_(r + window, c + window)]
        - s[np.ix_(r, c + window)]
        - s[np.ix_(r + window, c)]
        + s[np.ix_(r, c)]
    )
    return tot > 0


@dataclass
class SegmentationResult:
    labels: np.ndarray
    label_names: Tuple[str, ...]
    sharpness: List[Optional[np.ndarray]] = field(default_factory=list)
    masks: List[Optional[np.ndarray]] = field(default_factory=list)
    velocities: List[Optional[Tuple[float, float]]] = field(default_factory=list)
    plane_labels: List[np.ndarray] = field(default_factory=list)

    def label_text(self) -> List[str]:
        return ["" if k < 0 else self.label_names[k] for k in self.labels]


def segment_sweep(
    events,
    calib: FocalCalibrationMap,
    shape,
    window: int = 30,
    velocities=None,
    mode: str = "static",
    dwell_fraction: float = 0.02,
    actuator_range: Optional[Tuple[float, float]] = None,
) -> SegmentationResult:
    """Label events by the focal plane at which their region is sharpest.

    ``actuator_range`` (mm) sets the dwell tolerance, ``dwell_fraction``
    of its span; by default the span of the events' ``f`` field is used.
    Planes are visited in ``calib.visit_order``. Static mode removes labelled
    events from later planes; dynamic mode keeps them, and an event's final
    label is the last plane that claimed it.
    """
    if mode not in ("static", "dynamic"):
        raise ConfigError(f"unknown segmentation mode {mode!r}", "segment.mode")
    if calib is None:
        raise NoCalibration("segmentation needs a focal calibration map")
    n = len(events)
    labels = np.full(n, UNLABELED, dtype=np.int64)
    result = SegmentationResult(labels, calib.labels)
    if n:
        f_um = events["f"].astype(np.float64)
        if actuator_range is None:
            span = f_um.max() - f_um.min()
        else:
            span = (actuator_range[1] - actuator_range[0]) * 1000.0
        tol = dwell_fraction * span
    active = np.ones(n, dtype=bool)
    for k in calib.visit_order:
        pos_um = calib.positions[k] * 1000.0
        sel = np.flatnonzero(active & (np.abs(f_um - pos_um) <= tol)) if n else np.empty(0, int)
        if len(sel) == 0:
            warnings.warn(f"plane {calib.labels[k]!r}: no events in dwell", EmptyPlaneWarning)
            _skip(result)
            continue
        ev = events[sel]
        cm = cmax_linear(ev, shape, velocities)
        smap = sharpness_map(cm.image, window)
        try:
            thr = otsu_threshold(smap)
        except DegenerateHistogram:
            warnings.warn(f"plane {calib.labels[k]!r}: flat sharpness map", EmptyPlaneWarning)
            _skip(result, cm.velocity, smap)
            continue
        mask = window_mask(smap >= thr, window, shape)
        xw, yw = _warp(ev, cm.velocity, cm.t_ref)
        xi, yi = np.rint(xw).astype(np.intp), np.rint(yw).astype(np.intp)
        inside = (xi >= 0) & (xi < shape[1]) & (yi >= 0) & (yi < shape[0])
        hit = np.zeros(len(ev), dtype=bool)
        hit[inside] = mask[yi[inside], xi[inside]]
        claimed = sel[hit]
        labels[claimed] = k
        if mode == "static":
            active[claimed] = False
        result.sharpness.append(smap)
        result.masks.append(mask)
        result.velocities.append(cm.velocity)
        result.plane_labels.append(claimed)
    return result


def _skip(result, velocity=None, smap=None):
    result.sharpness.append(smap)
    result.masks.append(None)
    result.velocities.append(velocity)
    result.plane_labels.append(np.empty(0, dtype=np.int64))


def labeled_events_csv(events, result: SegmentationResult, path=None) -> str:
    return write_events_csv(events, path, extra={"label": result.label_text()})


def write_pgm(mask: np.ndarray, path) -> None:
    """Binary PGM (P5), 255 for set pixels."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


class FocusSegmenter(BaseEstimator):
    """Estimator form of :func:`segment_sweep`.

    ``fit`` stores the calibration map (and sensor shape); ``predict``
    returns per-event label indices (``-1`` for unlabeled).
    """

    def __init__(
        self,
        window=30,
        velocity_limit=100.0,
        velocity_steps=21,
        mode="static",
        dwell_fraction=0.02,
        actuator_range=None,
    ):
        self.window = window
        self.velocity_limit = velocity_limit
        self.velocity_steps = velocity_steps
        self.mode = mode
        self.dwell_fraction = dwell_fraction
        self.actuator_range = actuator_range

    def fit(self, calib: FocalCalibrationMap, shape=(256, 256)):
        if not isinstance(calib, FocalCalibrationMap):
            raise NoCalibration("fit expects a FocalCalibrationMap")
        self.calibration_ = calib
        self.shape_ = tuple(shape)
        return self

    def segment(self, events) -> SegmentationResult:
        return segment_sweep(
            events,
            self.calibration_,
            self.shape_,
            self.window,
            velocity_grid(self.velocity_limit, self.velocity_steps),
            self.mode,
            self.dwell_fraction,
            self.actuator_range,
        )

    def predict(self, events) -> np.ndarray:
        return self.segment(events).labels
