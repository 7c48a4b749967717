"""Spectral characterisation of focal sweeps.

Best-focus extraction and FWHM, the wavelength/focal-distance mapping,
spectral width and resolving power, light-source calibration, and import of
recorded or simulated profiles.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from .errors import (
    AmbiguousPeak,
    ConfigError,
    DivisionByZeroWidth,
    MissingReference,
    NonMonotoneFocus,
    NonPositiveQE,
    NoPeak,
    OutOfCurveRange,
    ParseError,
    ZeroSlope,
)

__all__ = [
    "SpectralProfile",
    "PeakResult",
    "moving_average",
    "find_peak_and_fwhm",
    "FocusCurve",
    "spectral_width",
    "resolving_power",
    "ResolvingPowerRow",
    "resolving_power_table",
    "resolving_power_csv",
    "frame_profiles",
    "event_profile",
    "plane_edges_um",
    "events_in_window",
    "import_recording",
    "CalibrationRow",
    "calibration_targets",
    "calibration_csv",
    "read_calibration_csv",
    "FocusSpectrometer",
]

FRAME = "frame_peak_intensity"
EVENT = "event_rate"


@dataclass
class SpectralProfile:
    """Response versus focal distance for one wavelength."""

    wavelength: float
    f: np.ndarray
    response: np.ndarray
    source: str = FRAME

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        r = np.asarray(self.response, dtype=float)
        if f.shape != r.shape or f.ndim != 1:
            raise ConfigError("profile positions and responses must be equal-length 1-D", "profile")
        order = np.argsort(f, kind="stable")
        self.f, self.response = f[order], r[order]

    def peak(self, **kwargs) -> "PeakResult":
        return find_peak_and_fwhm(self.f, self.response, **kwargs)


@dataclass(frozen=True)
class PeakResult:
    f0: float
    fwhm: float
    ambiguous: bool = False
    index: int = -1


def moving_average(y, window: int = 5) -> np.ndarray:
    """Centred moving average; windows shrink symmetrically at the ends."""
    y = np.asarray(y, dtype=float)
    if window < 1:
        raise ConfigError("smoothing window must be >= 1", "analysis.smooth")
    if window == 1 or len(y) == 0:
        return y.copy()
    half = window // 2
    out = np.empty_like(y)
    n = len(y)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = y[i - h : i + h + 1].mean()
    return out


def _crossing(f, y, i, j, level):
    # linear interpolation between samples i and j for y == level
    if y[j] == y[i]:
        return f[i]
    return f[i] + (level - y[i]) * (f[j] - f[i]) / (y[j] - y[i])


def find_peak_and_fwhm(
    f, response, smooth: int = 5, refine: bool = True, strict: bool = False
) -> PeakResult:
    """Peak location and full width at half maximum of a sampled profile.

    The half level is halfway between the profile minimum and its peak.
    With ``refine`` the peak is located at the vertex of the parabola
    through the maximum sample and its neighbours, which removes the
    quantisation of a coarse distance grid. A missing half-max crossing
    gives ``fwhm = nan`` and ``ambiguous = True`` (or raises with
    ``strict``).
    """
    f = np.asarray(f, dtype=float)
    r = np.asarray(response, dtype=float)
    if len(f) != len(r):
        raise ConfigError("profile positions and responses differ in length", "profile")
    if len(f) < 5:
        raise NoPeak(f"need at least 5 samples to locate a peak, got {len(f)}")
    order = np.argsort(f, kind="stable")
    f, r = f[order], r[order]
    y = moving_average(r, smooth)
    d = np.diff(y)
    if np.all(d >= 0) or np.all(d <= 0):
        raise NoPeak("profile is monotone")
    top = y.max()
    # centre of the first plateau of maximal samples
    j0 = int(np.argmax(y))
    j1 = j0
    while j1 + 1 < len(y) and y[j1 + 1] == top:
        j1 += 1
    j = (j0 + j1) // 2
    if j0 != j1:
        f0 = 0.5 * (f[j0] + f[j1])
    elif refine and 0 < j < len(y) - 1:
        f0 = _parabola_vertex(f[j - 1 : j + 2], y[j - 1 : j + 2])
    else:
        f0 = f[j]
    base = y.min()
    half = base + 0.5 * (top - base)
    left = right = None
    for i in range(j0, 0, -1):
        if y[i - 1] < half:
            left = _crossing(f, y, i - 1, i, half)
            break
    for i in range(j1, len(y) - 1):
        if y[i + 1] < half:
            right = _crossing(f, y, i, i + 1, half)
            break
    if left is None or right is None:
        if strict:
            side = "left" if left is None else "right"
            raise AmbiguousPeak(f"no half-maximum crossing on the {side} of the peak")
        return PeakResult(float(f0), math.nan, True, j)
    return PeakResult(float(f0), float(right - left), False, j)


def _parabola_vertex(x, y):
    a, b, _ = np.polyfit(x - x[1], y, 2)
    if a >= 0:
        return float(x[1])
    v = x[1] - b / (2.0 * a)
    return float(np.clip(v, x[0], x[2]))


class FocusCurve:
    """Monotone piecewise-cubic wavelength as a function of best-focus distance.

    Knots are ``(wavelength, f0)`` pairs with strictly increasing wavelength;
    f0 must move strictly monotonically with wavelength so the mapping can
    be inverted.
    """

    def __init__(self, wavelengths, f0):
        lam = np.asarray(wavelengths, dtype=float)
        f0 = np.asarray(f0, dtype=float)
        if lam.ndim != 1 or lam.shape != f0.shape or len(lam) < 2:
            raise ConfigError("focus curve needs at least two (wavelength, f0) pairs", "curve")
        if np.any(np.diff(lam) <= 0):
            raise ConfigError("focus curve wavelengths must be strictly increasing", "curve")
        if not np.all(np.isfinite(f0)):
            raise ConfigError("focus curve positions must be finite", "curve")
        step = np.diff(f0)
        if np.any(step == 0):
            raise ZeroSlope("two wavelengths share one best-focus distance; slope is unbounded")
        if not (np.all(step > 0) or np.all(step < 0)):
            raise NonMonotoneFocus(f"best-focus positions {f0.tolist()} are not monotone")
        self.wavelengths = lam
        self.f0 = f0
        order = np.argsort(f0)
        self._lam_of_f = PchipInterpolator(f0[order], lam[order])
        self._dlam_df = self._lam_of_f.derivative()

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.wavelengths.tolist(), self.f0.tolist()))

    def wavelength_at(self, f):
        lo, hi = self.f0.min(), self.f0.max()
        fa = np.asarray(f, dtype=float)
        if np.any(fa < lo) or np.any(fa > hi):
            raise OutOfCurveRange(f"focal distance {f} outside [{lo}, {hi}] mm")
        out = self._lam_of_f(fa)
        return float(out) if out.ndim == 0 else out

    def focus_at(self, wavelength: float) -> float:
        lam = float(wavelength)
        if not self.wavelengths[0] <= lam <= self.wavelengths[-1]:
            raise OutOfCurveRange(
                f"wavelength {lam} nm outside [{self.wavelengths[0]}, {self.wavelengths[-1]}] nm"
            )
        hit = np.flatnonzero(self.wavelengths == lam)
        if len(hit):
            return float(self.f0[hit[0]])
        lo, hi = self.f0.min(), self.f0.max()
        return float(brentq(lambda x: self._lam_of_f(x) - lam, lo, hi, xtol=1e-12))

    def slope(self, wavelength: float) -> float:
        """dlambda/df (nm/mm) at the focus of ``wavelength``."""
        return float(self._dlam_df(self.focus_at(wavelength)))


def spectral_width(curve: FocusCurve, wavelength: float, fwhm: float, max_slope: float = 1e6) -> float:
    """Delta-lambda = |dlambda/df| * FWHM."""
    if fwhm < 0 or not math.isfinite(fwhm):
        raise ConfigError(f"FWHM must be finite and non-negative, got {fwhm}", "fwhm")
    s = abs(curve.slope(wavelength))
    if s > max_slope:
        raise ZeroSlope(f"|dlambda/df| = {s:.3g} nm/mm exceeds cap {max_slope:g}")
    return s * fwhm


def resolving_power(wavelength: float, delta_lambda: float) -> float:
    if delta_lambda == 0:
        raise DivisionByZeroWidth("spectral width is zero")
    if delta_lambda < 0:
        raise ConfigError("spectral width must be positive", "delta_lambda")
    return wavelength / delta_lambda


@dataclass(frozen=True)
class ResolvingPowerRow:
    wavelength: float
    f0: float
    fwhm: float
    delta_lambda: float
    eta: float


def resolving_power_table(
    profiles: Sequence[SpectralProfile],
    max_wavelength: Optional[float] = 700.0,
    smooth: int = 5,
    refine: bool = True,
    max_slope: float = 1e6,
    degenerate: str = "raise",
) -> List[ResolvingPowerRow]:
    """Per-wavelength f0, FWHM, spectral width and resolving power.

    The focus curve is fitted to every profile; rows above
    ``max_wavelength`` are dropped from the report. Profiles with an
    undefined FWHM report ``nan`` width and resolving power. When the
    best-focus positions cannot form a curve (ties or reversals),
    ``degenerate="nan"`` keeps the f0/FWHM columns and reports ``nan``
    width instead of raising.
    """
    if degenerate not in ("raise", "nan"):
        raise ConfigError(f"unknown degenerate policy {degenerate!r}", "degenerate")
    profiles = sorted(profiles, key=lambda p: p.wavelength)
    peaks = [p.peak(smooth=smooth, refine=refine) for p in profiles]
    try:
        curve = FocusCurve([p.wavelength for p in profiles], [k.f0 for k in peaks])
    except (ZeroSlope, NonMonotoneFocus):
        if degenerate == "raise":
            raise
        curve = None
    rows = []
    for p, k in zip(profiles, peaks):
        if max_wavelength is not None and p.wavelength > max_wavelength:
            continue
        if k.ambiguous or curve is None:
            fwhm = math.nan if k.ambiguous else k.fwhm
            rows.append(ResolvingPowerRow(p.wavelength, k.f0, fwhm, math.nan, math.nan))
            continue
        dl = spectral_width(curve, p.wavelength, k.fwhm, max_slope)
        eta = resolving_power(p.wavelength, dl) if dl > 0 else math.inf
        rows.append(ResolvingPowerRow(p.wavelength, k.f0, k.fwhm, dl, eta))
    return rows


def resolving_power_csv(rows: Iterable[ResolvingPowerRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda_nm", "f0_mm", "fwhm_mm", "dlambda_nm", "eta"])
    for r in rows:
        w.writerow([_fmt(r.wavelength), _fmt(r.f0), _fmt(r.fwhm), _fmt(r.delta_lambda), _fmt(r.eta)])
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x)) if math.isfinite(x) else str(float(x))


# -- profile construction -----------------------------------------------------


def frame_profiles(stack, wavelengths=None) -> List[SpectralProfile]:
    from .retina import peak_profile

    lams = stack.wavelengths if wavelengths is None else wavelengths
    out = []
    for lam in lams:
        d, pk = peak_profile(stack, float(lam))
        out.append(SpectralProfile(float(lam), d, pk, FRAME))
    return out


def event_profile(events, wavelength, edges_um, mapping=None) -> SpectralProfile:
    """Event-rate profile over actuator-position bins.

    ``edges_um`` are bin edges in um of the ``f`` field. Bin centres are
    reported in mm of retina distance when a ``DistanceMapping`` is given,
    otherwise in mm of actuator position.
    """
    from .events import event_rate_profile

    edges = np.asarray(edges_um, dtype=float)
    if len(events):
        edges, counts = event_rate_profile(events, edges=edges)
    else:
        counts = np.zeros(len(edges) - 1)
    centres = 0.5 * (edges[1:] + edges[:-1]) / 1000.0
    if mapping is not None:
        centres = mapping.to_distance(centres)
    return SpectralProfile(float(wavelength), centres, counts, EVENT)


def events_in_window(events, center, half_side: float):
    """Events whose pixel centre lies in a square around ``center`` (row, col)."""
    r0, c0 = center
    ys = events["y"].astype(float) + 0.5
    xs = events["x"].astype(float) + 0.5
    keep = (np.abs(ys - r0) <= half_side) & (np.abs(xs - c0) <= half_side)
    return events[keep]


def plane_edges_um(stack_distances, mapping) -> np.ndarray:
    """Bin edges (um) placed midway between consecutive stack distances."""
    pos = np.asarray(mapping.to_position(stack_distances), dtype=float) * 1000.0
    mid = 0.5 * (pos[1:] + pos[:-1])
    first = pos[0] - (mid[0] - pos[0])
    last = pos[-1] + (pos[-1] - mid[-1])
    return np.concatenate([[max(first, 0.0)], mid, [last]])


def import_recording(
    path,
    wavelength: Optional[float] = None,
    edges_um=None,
    bin_um: float = 100.0,
    period_us: Optional[float] = None,
    n_cycles: Optional[int] = None,
    trim: Tuple[int, int] = (0, 0),
    mapping=None,
) -> List[SpectralProfile]:
    """Build profiles from an event CSV/binary file or a stack file.

    Stack files give one frame-peak profile per wavelength. Event files give
    a single event-rate profile for ``wavelength``. Multi-cycle recordings
    can drop ``trim = (leading, trailing)`` whole cycles; cycle ``c`` covers
    ``(c * period, (c + 1) * period]`` so the turnaround sample closing a
    cycle stays with it.
    """
    from .events import EVENT_MAGIC, read_events_bin, read_events_csv
    from .retina import STACK_MAGIC, read_stack

    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == STACK_MAGIC:
        return frame_profiles(read_stack(path))
    events = read_events_bin(path) if head == EVENT_MAGIC else read_events_csv(path)
    if wavelength is None:
        raise ConfigError("event recordings need the wavelength they were taken at", "wavelength")
    lead, trail = trim
    if lead or trail:
        if period_us is None or n_cycles is None:
            raise ConfigError("cycle trimming needs period_us and n_cycles", "trim")
        if lead < 0 or trail < 0 or lead + trail >= n_cycles:
            raise ConfigError(f"cannot trim {trim} from {n_cycles} cycles", "trim")
        t = events["t"].astype(float)
        cyc = np.maximum(np.ceil(t / period_us) - 1, 0)
        events = events[(cyc >= lead) & (cyc < n_cycles - trail)]
    if edges_um is None:
        if len(events) == 0:
            edges_um = np.array([0.0, bin_um])
        else:
            f = events["f"].astype(float)
            lo = math.floor(f.min() / bin_um) * bin_um
            n = int(math.floor((f.max() - lo) / bin_um)) + 1
            edges_um = lo + bin_um * np.arange(n + 1)
    return [event_profile(events, wavelength, edges_um, mapping)]


# -- light-source calibration -------------------------------------------------


@dataclass(frozen=True)
class CalibrationRow:
    wavelength: float
    qe: float
    p_full: float
    p_dark: float
    p_adjusted: float
    p_target: float


def calibration_targets(rows, p_dark: float, reference: float = 1000.0) -> List[CalibrationRow]:
    """Source powers that reproduce the reference wavelength's sensor signal.

    ``rows`` are ``(wavelength_nm, QE, P_full_nW)``. The adjusted power is
    ``P_full * QE - P_dark`` and the target is the reference row's adjusted
    power divided by each row's QE.
    """
    rows = [(float(a), float(b), float(c)) for a, b, c in rows]
    for lam, qe, _ in rows:
        if not qe > 0:
            raise NonPositiveQE(f"QE at {lam} nm is {qe}; must be > 0")
        if qe > 1:
            raise ConfigError(f"QE at {lam} nm is {qe}; must be <= 1", "qe")
    ref = [r for r in rows if r[0] == reference]
    if not ref:
        raise MissingReference(f"reference wavelength {reference} nm not in calibration rows")
    _, qe_ref, pf_ref = ref[0]
    p_ref = pf_ref * qe_ref - p_dark
    return [
        CalibrationRow(lam, qe, pf, p_dark, pf * qe - p_dark, p_ref / qe) for lam, qe, pf in rows
    ]


def calibration_csv(rows: Iterable[CalibrationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda_nm", "qe", "p_full_nw", "p_dark_nw", "p_adjusted_nw", "p_target_nw"])
    for r in rows:
        w.writerow([_fmt(v) for v in (r.wavelength, r.qe, r.p_full, r.p_dark, r.p_adjusted, r.p_target)])
    return buf.getvalue()


def read_calibration_csv(path) -> List[Tuple[float, float, float]]:
    """Read ``lambda_nm,qe,p_full_nw`` rows (extra columns are ignored)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: line 1: empty file") from None
        need = ["lambda_nm", "qe", "p_full_nw"]
        if any(c not in header for c in need):
            raise ParseError(f"{path}: line 1: header must contain {need}")
        idx = [header.index(c) for c in need]
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(tuple(float(row[i]) for i in idx))
            except (ValueError, IndexError):
                raise ParseError(f"{path}: line {lineno}: cannot parse {row!r}") from None
    return out


class FocusSpectrometer(BaseEstimator):
    """Learns the wavelength/best-focus mapping from calibration profiles.

    ``fit`` takes a list of :class:`SpectralProfile`; ``predict`` maps
    best-focus distances to wavelengths and ``resolving_power`` reports the
    per-wavelength table.
    """

    def __init__(self, smooth=5, refine=True, max_wavelength=700.0, max_slope=1e6):
        self.smooth = smooth
        self.refine = refine
        self.max_wavelength = max_wavelength
        self.max_slope = max_slope

    def fit(self, X, y=None):
        profiles = list(X)
        self.rows_ = resolving_power_table(
            profiles, None, self.smooth, self.refine, self.max_slope
        )
        self.curve_ = FocusCurve([r.wavelength for r in self.rows_], [r.f0 for r in self.rows_])
        return self

    def predict(self, X):
        return np.asarray(self.curve_.wavelength_at(np.asarray(X, dtype=float)))

    def resolving_power(self) -> List[ResolvingPowerRow]:
        cap = self.max_wavelength
        return [r for r in self.rows_ if cap is None or r.wavelength <= cap]
