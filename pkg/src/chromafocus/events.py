"""Event-stream synthesis from focal sweeps.

The actuator moves the retina back and forth; every time it crosses one of
the stack's retina distances the corresponding intensity plane is shown to a
log temporal-contrast pixel model. Each pixel keeps a reference level on a
ladder ``base + k * C``; whenever the current log intensity is at least one
threshold away from the reference, events are emitted and the reference
moves by ``C`` per event.

Events are stored as a packed numpy structured array with fields ``t`` (us),
``x`` (column), ``y`` (row), ``p`` (+1/-1) and ``f`` (actuator position, um),
which is also the record layout of the binary event file.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, MappingGap, MissingFocalField, OutOfSweep, ParseError
from .retina import IntensityStack, composite_planes

__all__ = [
    "EVENT_DTYPE",
    "ActuatorProfile",
    "DistanceMapping",
    "EventSimParams",
    "actuator_position",
    "sample_schedule",
    "synthesize_events",
    "synthesize_from_planes",
    "synthesize_scene",
    "event_rate_profile",
    "sort_events",
    "write_events_bin",
    "read_events_bin",
    "write_events_csv",
    "read_events_csv",
    "EventSynthesizer",
]

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("f", "<u4")])
EVENT_MAGIC = b"CPHEVT01"
CSV_HEADER = ["t_us", "x", "y", "p", "f_um"]
# absorbs rounding when a log step lands exactly on a threshold multiple
LADDER_SLACK = 1e-9


@dataclass(frozen=True)
class ActuatorProfile:
    """Periodic actuator sweep starting at ``f_min`` at t = 0 (mm, Hz)."""

    f_min: float = 0.5
    f_max: float = 30.0
    frequency: float = 0.06
    waveform: str = "triangular"
    n_cycles: int = 1

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ConfigError(
                f"actuator range needs f_min < f_max (got {self.f_min} >= {self.f_max})",
                "actuator.f_min/f_max",
            )
        if not self.frequency > 0:
            raise ConfigError("actuator frequency must be positive", "actuator.frequency")
        if self.waveform not in ("triangular", "sinusoidal"):
            raise ConfigError(f"unknown waveform {self.waveform!r}", "actuator.waveform")
        if self.n_cycles < 1:
            raise ConfigError("actuator needs at least one cycle", "actuator.n_cycles")

    @property
    def period_us(self) -> float:
        return 1e6 / self.frequency

    @property
    def duration_us(self) -> float:
        return self.n_cycles * self.period_us


def actuator_position(profile: ActuatorProfile, t_us) -> float:
    t = np.asarray(t_us, dtype=float)
    if np.any(t < 0) or np.any(t > profile.duration_us * (1 + 1e-12)):
        raise OutOfSweep(f"time {t_us} us outside [0, {profile.duration_us}] us")
    phase = np.mod(t / profile.period_us, 1.0)
    phase = np.where((t > 0) & (phase == 0) & np.isclose(t, profile.duration_us), 1.0, phase)
    if profile.waveform == "triangular":
        u = np.where(phase <= 0.5, 2.0 * phase, 2.0 - 2.0 * phase)
    else:
        u = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    pos = profile.f_min + (profile.f_max - profile.f_min) * u
    return float(pos) if pos.ndim == 0 else pos


def _forward_phase(profile: ActuatorProfile, position):
    """Fraction of a period (0..0.5) at which the rising ramp reaches ``position``."""
    u = (np.asarray(position, dtype=float) - profile.f_min) / (profile.f_max - profile.f_min)
    u = np.clip(u, 0.0, 1.0)
    if profile.waveform == "triangular":
        return 0.5 * u
    return np.arccos(1.0 - 2.0 * u) / (2.0 * np.pi)


@dataclass(frozen=True)
class DistanceMapping:
    """Retina distance (mm from lens centre) = ``offset + scale * position``."""

    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("distance mapping scale must be positive", "mapping.scale")

    def to_position(self, distance):
        return (np.asarray(distance, dtype=float) - self.offset) / self.scale

    def to_distance(self, position):
        return self.offset + self.scale * np.asarray(position, dtype=float)


@dataclass(frozen=True)
class EventSimParams:
    threshold: float = 0.2
    init: str = "first"
    refractory_us: float = 0.0
    eps: float = 1.0
    interpolate_dt_us: Optional[float] = None

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError("contrast threshold must be positive", "events.threshold")
        if self.refractory_us < 0:
            raise ConfigError("refractory period must be non-negative", "events.refractory_us")
        if self.init not in ("first", "zero"):
            raise ConfigError(f"unknown reference init {self.init!r}", "events.init")
        if not self.eps > 0:
            raise ConfigError("log offset must be positive", "events.eps")


def sample_schedule(
    distances, profile: ActuatorProfile, mapping: DistanceMapping, interpolate_dt_us=None
):
    """Time samples of a sweep.

    Returns ``(t_us, position_index)`` where ``t_us`` are integer
    microseconds and ``position_index`` is a float index into ``distances``
    (integral unless ``interpolate_dt_us`` is set).
    """
    distances = np.asarray(distances, dtype=float)
    if len(distances) < 2:
        raise MappingGap("event synthesis needs at least two retina distances")
    pos = mapping.to_position(distances)
    tol = 1e-9 * max(1.0, abs(profile.f_max))
    if profile.f_min < pos[0] - tol or profile.f_max > pos[-1] + tol:
        raise MappingGap(
            f"actuator range [{profile.f_min}, {profile.f_max}] mm exceeds stack coverage "
            f"[{pos[0]:.6g}, {pos[-1]:.6g}] mm"
        )
    T = profile.period_us
    if interpolate_dt_us is not None:
        t = np.arange(0.0, profile.duration_us + 0.5, float(interpolate_dt_us))
        t = np.unique(np.rint(t).astype(np.int64))
        t = t[t <= profile.duration_us]
        where = np.interp(actuator_position(profile, t), pos, np.arange(len(pos), dtype=float))
        return t, where

    inside = np.flatnonzero((pos >= profile.f_min - tol) & (pos <= profile.f_max + tol))
    ph = _forward_phase(profile, pos[inside])
    times, idx = [], []
    for c in range(profile.n_cycles):
        times.append((c + ph) * T)
        idx.append(inside)
        times.append((c + 1.0 - ph) * T)
        idx.append(inside)
    t = np.rint(np.concatenate(times)).astype(np.int64)
    k = np.concatenate(idx)
    order = np.lexsort((k, t))
    t, k = t[order], k[order]
    # turnaround crossings occur once, not twice
    keep = np.ones(len(t), dtype=bool)
    keep[1:] = t[1:] != t[:-1]
    return t[keep], k[keep].astype(float)


def _planes_at(planes, where):
    lo = np.floor(where).astype(int)
    hi = np.minimum(lo + 1, len(planes) - 1)
    w = where - lo
    for a, b, ww in zip(lo, hi, w):
        yield planes[a] if ww == 0 else (1.0 - ww) * planes[a] + ww * planes[b]


def _ladder(log_frames, times, positions_um, params: EventSimParams, shape):
    C = params.threshold
    frames = iter(log_frames)
    first = next(frames)
    base = first.copy() if params.init == "first" else np.full(shape, math.log(params.eps))
    level = np.zeros(shape, dtype=np.int64)
    last_t = np.full(shape, -np.inf)
    chunks = []
    start = 1 if params.init == "first" else 0
    if start == 0:
        frames = iter([first, *frames])
    for s, L in enumerate(frames, start=start):
        t, f = times[s], positions_um[s]
        diff = L - (base + level * C)
        n = np.floor(np.abs(diff) / C + LADDER_SLACK).astype(np.int64)
        if params.refractory_us > 0:
            n = np.minimum(n, 1)
            n[t - last_t < params.refractory_us] = 0
        fire = n > 0
        if not np.any(fire):
            continue
        sign = np.sign(diff).astype(np.int64)
        level[fire] += sign[fire] * n[fire]
        last_t[fire] = t
        ys, xs = np.nonzero(fire)
        reps = n[ys, xs]
        ev = np.empty(int(reps.sum()), dtype=EVENT_DTYPE)
        ev["t"] = t
        ev["x"] = np.repeat(xs, reps)
        ev["y"] = np.repeat(ys, reps)
        ev["p"] = np.repeat(sign[ys, xs], reps)
        ev["f"] = f
        chunks.append(ev)
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    return np.concatenate(chunks)


def sort_events(events: np.ndarray) -> np.ndarray:
    """Canonical order: by t, then y, x, p."""
    order = np.lexsort((events["p"], events["x"], events["y"], events["t"]))
    return events[order]


def synthesize_events(
    stack: IntensityStack,
    spectrum,
    profile: ActuatorProfile,
    params: EventSimParams = EventSimParams(),
    mapping: DistanceMapping = DistanceMapping(),
) -> np.ndarray:
    """Replay a focal sweep of ``stack`` through the pixel model.

    ``spectrum`` is a wavelength in the stack or a ``{wavelength: weight}``
    mapping for a composite source. Each event's ``f`` field is the actuator
    position at the event's integer timestamp, rounded to whole um.
    """
    planes = composite_planes(stack, spectrum)
    return synthesize_from_planes(planes, stack.distances, profile, params, mapping)


def synthesize_from_planes(
    planes,
    distances,
    profile: ActuatorProfile,
    params: EventSimParams = EventSimParams(),
    mapping: DistanceMapping = DistanceMapping(),
) -> np.ndarray:
    """Event synthesis from an ``[n_dist, rows, cols]`` intensity array."""
    planes = np.asarray(planes)
    if planes.ndim != 3 or len(planes) != len(distances):
        raise ConfigError("planes must be [n_distances, rows, cols]", "planes")
    t, where = sample_schedule(distances, profile, mapping, params.interpolate_dt_us)
    f_um = np.rint(np.asarray(actuator_position(profile, t)) * 1000.0).astype(np.int64)
    logs = (np.log(p + params.eps) for p in _planes_at(planes, where))
    events = _ladder(logs, t, f_um, params, planes.shape[1:])
    return sort_events(events)


def synthesize_scene(
    source_planes,
    distances,
    profile: ActuatorProfile,
    params: EventSimParams = EventSimParams(),
    mapping: DistanceMapping = DistanceMapping(),
):
    """Events from several incoherent sources imaged together.

    ``source_planes`` is ``[n_sources, n_dist, rows, cols]``; the sensor sees
    their sum. Returns ``(events, source)`` where ``source[i]`` is the index
    of the source contributing the most intensity at event ``i``'s pixel and
    time sample (the ground truth for segmentation).
    """
    source_planes = np.asarray(source_planes)
    total = source_planes.sum(axis=0)
    events = synthesize_from_planes(total, distances, profile, params, mapping)
    t, where = sample_schedule(distances, profile, mapping, params.interpolate_dt_us)
    k = np.searchsorted(t, events["t"].astype(np.int64))
    w = where[k]
    lo = np.floor(w).astype(int)
    hi = np.minimum(lo + 1, len(distances) - 1)
    frac = (w - lo)[None, :]
    y, x = events["y"].astype(np.intp), events["x"].astype(np.intp)
    inten = (1 - frac) * source_planes[:, lo, y, x] + frac * source_planes[:, hi, y, x]
    return events, np.argmax(inten, axis=0)


def event_rate_profile(events, bin_us=None, bin_f_um=None, edges=None, normalize=False):
    """Histogram of events over time or over the focal-distance field.

    Give exactly one of ``bin_us`` (time bins), ``bin_f_um`` (focal bins) or
    explicit ``edges`` together with ``field`` implied by which is set;
    ``edges`` are interpreted on the ``f`` field in um. Returns
    ``(edges, counts)``; an empty stream gives empty arrays.
    """
    events = np.asarray(events)
    if len(events) == 0:
        return np.empty(0), np.empty(0)
    if edges is not None:
        values, edges = events["f"].astype(float), np.asarray(edges, dtype=float)
    elif bin_f_um is not None:
        values = events["f"].astype(float)
        edges = _edges(values, bin_f_um)
    elif bin_us is not None:
        values = events["t"].astype(float)
        edges = _edges(values, bin_us)
    else:
        raise ConfigError("event_rate_profile needs bin_us, bin_f_um or edges", "bin")
    counts, edges = np.histogram(values, bins=edges)
    counts = counts.astype(float)
    if normalize and counts.max() > 0:
        counts /= counts.max()
    return edges, counts


def _edges(values, width):
    lo = math.floor(values.min() / width) * width
    n = max(1, int(math.floor((values.max() - lo) / width)) + 1)
    return lo + width * np.arange(n + 1)


# -- file formats ------------------------------------------------------------


def write_events_bin(events, path) -> None:
    events = np.asarray(events, dtype=EVENT_DTYPE)
    with open(path, "wb") as fh:
        fh.write(EVENT_MAGIC)
        fh.write(struct.pack("<I", len(events)))
        fh.write(events.tobytes())


def read_events_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != EVENT_MAGIC:
        raise ParseError(f"{path}: bad magic at offset 0, expected {EVENT_MAGIC!r}")
    if len(data) < 12:
        raise ParseError(f"{path}: truncated header at offset 8")
    (n,) = struct.unpack_from("<I", data, 8)
    need = 12 + n * EVENT_DTYPE.itemsize
    if len(data) != need:
        raise ParseError(f"{path}: expected {need} bytes for {n} events, found {len(data)} (offset 12)")
    return np.frombuffer(data, EVENT_DTYPE, n, 12).copy()


def write_events_csv(events, path=None, extra=None) -> str:
    """Write ``t_us,x,y,p,f_um`` CSV; ``extra`` maps column name -> values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow(CSV_HEADER + list(extra))
    cols = [events["t"], events["x"], events["y"], events["p"], events["f"]]
    cols += [np.asarray(v) for v in extra.values()]
    for row in zip(*cols):
        w.writerow([int(v) if np.issubdtype(type(v), np.integer) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_events_csv(source) -> np.ndarray:
    """Parse an event CSV from a path or an open text stream."""
    if hasattr(source, "read"):
        return _parse_csv(source, getattr(source, "name", "<stream>"))
    with open(source, newline="") as fh:
        return _parse_csv(fh, str(source))


def _parse_csv(fh, name):
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError(f"{name}: line 1: empty file") from None
    if "f_um" not in header:
        raise MissingFocalField(f"{name}: line 1: no f_um column in header {header}")
    missing = [c for c in CSV_HEADER if c not in header]
    if missing:
        raise ParseError(f"{name}: line 1: missing columns {missing}")
    col = [header.index(c) for c in CSV_HEADER]
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            t, x, y, p, f = (int(row[i]) for i in col)
        except (ValueError, IndexError):
            raise ParseError(f"{name}: line {lineno}: cannot parse {row!r}") from None
        if p not in (-1, 1) or min(t, x, y, f) < 0:
            raise ParseError(f"{name}: line {lineno}: field out of range in {row!r}")
        rows.append((t, x, y, p, f))
    return np.array(rows, dtype=EVENT_DTYPE)


class EventSynthesizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform(stack)`` returns the event stream.

    ``spectrum`` selects the source (a wavelength or a weight mapping);
    ``None`` uses the stack's first wavelength.
    """

    def __init__(
        self,
        threshold=0.2,
        refractory_us=0.0,
        init="first",
        eps=1.0,
        f_min=0.5,
        f_max=30.0,
        frequency=0.06,
        waveform="triangular",
        n_cycles=1,
        mapping_offset=0.0,
        mapping_scale=1.0,
        spectrum=None,
    ):
        self.threshold = threshold
        self.refractory_us = refractory_us
        self.init = init
        self.eps = eps
        self.f_min = f_min
        self.f_max = f_max
        self.frequency = frequency
        self.waveform = waveform
        self.n_cycles = n_cycles
        self.mapping_offset = mapping_offset
        self.mapping_scale = mapping_scale
        self.spectrum = spectrum

    def fit(self, X, y=None):
        if not isinstance(X, IntensityStack):
            raise TypeError("EventSynthesizer expects an IntensityStack")
        self.params_ = EventSimParams(self.threshold, self.init, self.refractory_us, self.eps)
        self.profile_ = ActuatorProfile(
            self.f_min, self.f_max, self.frequency, self.waveform, self.n_cycles
        )
        self.mapping_ = DistanceMapping(self.mapping_offset, self.mapping_scale)
        sample_schedule(X.distances, self.profile_, self.mapping_)
        self.sensor_shape_ = X.planes.shape[2:]
        return self

    def transform(self, X):
        if not hasattr(self, "params_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit before transform")
        spectrum = float(X.wavelengths[0]) if self.spectrum is None else self.spectrum
        return synthesize_events(X, spectrum, self.profile_, self.params_, self.mapping_)
