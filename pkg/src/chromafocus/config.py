"""Run configuration: YAML loading, validation and the resolved copy.

Every section is optional and falls back to the defaults below. Unknown keys
anywhere are rejected so typos surface immediately.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from . import dispersion as D
from .errors import ConfigError
from .events import ActuatorProfile, DistanceMapping, EventSimParams
from .pupil import PupilMask, mask_from_dict
from .retina import RetinaGrid
from .tracer import GrinSphere, TraceConfig

SCHEMA_VERSION = 1

DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "threads": None,
    "sphere": {
        "radius": 50.0,
        "material": "n-bk7",
        "core": None,
        "outer": None,
        "medium": "air",
    },
    "pupil": {"shape": "full"},
    "trace": {
        "n_rays": 100000,
        "ds": None,
        "source_position": [0.0, 0.0, -1.0e9],
        "emission": "fibonacci",
        "half_angle": None,
        "n_per_axis": 101,
    },
    "retina": {"n_rows": 256, "n_cols": 256, "max_polar": 90.0, "projection": "equidistant"},
    "sweep": {
        "wavelengths": [450.0, 500.0, 550.0, 600.0, 650.0],
        "distances": {"start": 60.0, "stop": 76.0, "num": 60},
    },
    "actuator": {
        "f_min": None,
        "f_max": None,
        "frequency": 0.05,
        "waveform": "triangular",
        "n_cycles": 1,
    },
    "mapping": {"offset": None, "scale": 1.0},
    "events": {
        "threshold": 0.2,
        "refractory_us": 0.0,
        "init": "first",
        "eps": 1.0,
        "interpolate_dt_us": None,
        "composite": None,
        "formats": ["csv", "bin"],
    },
    "analysis": {
        "smooth": 5,
        "refine": True,
        "max_wavelength": 700.0,
        "max_slope": 1.0e6,
        "event_roi": 3.0,
    },
    "calibrate": {"input": None, "p_dark": 0.02554, "reference": 1000.0},
    "segment": {
        "events": None,
        "calibration": None,
        "window": 30,
        "velocity_limit": 100.0,
        "velocity_steps": 21,
        "mode": "static",
        "dwell_fraction": 0.02,
    },
    "spectrum": {
        "composites": {"red": {650.0: 1.0}, "red_blue": {650.0: 1.0, 450.0: 1.0}},
        "eps": 1.0,
        "azimuth_slice": None,
        "n_radial": None,
        "max_radius": None,
    },
}


# values that are data rather than nested settings
FREEFORM = {"sweep.distances", "spectrum.composites", "events.composite", "segment.calibration"}


def _merge(base, over, path=""):
    if not isinstance(over, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping", path or "<root>")
    out = copy.deepcopy(base)
    for key, value in over.items():
        here = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}", here)
        # free-form mappings are replaced wholesale
        if isinstance(base[key], dict) and here not in FREEFORM:
            out[key] = _merge(base[key], value if value is not None else {}, here)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> "RunConfig":
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}", "<file>") from None
    cfg = RunConfig.from_dict(raw, overrides)
    if path is not None:
        cfg.anchor_paths(os.path.dirname(os.path.abspath(path)))
    return cfg


# file-valued settings; relative values are read against the config's folder
PATH_KEYS = (("calibrate", "input"), ("segment", "events"))


@dataclass
class RunConfig:
    data: Dict[str, Any]

    @classmethod
    def from_dict(cls, raw: dict, overrides: Optional[dict] = None) -> "RunConfig":
        raw = dict(raw or {})
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}", "schema_version")
        data = _merge(DEFAULTS, raw)
        for k, v in (overrides or {}).items():
            if v is not None:
                data[k] = v
        cfg = cls(data)
        cfg.validate()
        return cfg

    def anchor_paths(self, base: str) -> None:
        for section, key in PATH_KEYS:
            v = self.data[section][key]
            if v is not None and not os.path.isabs(str(v)):
                self.data[section][key] = os.path.normpath(os.path.join(base, str(v)))

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def threads(self) -> int:
        t = self.data["threads"]
        return int(t) if t is not None else (os.cpu_count() or 1)

    def sphere(self) -> GrinSphere:
        s = self.data["sphere"]
        radius = _positive(s["radius"], "sphere.radius")
        medium = _model(s["medium"], "sphere.medium")
        if s["core"] is not None or s["outer"] is not None:
            if s["core"] is None or s["outer"] is None:
                raise ConfigError("a graded sphere needs both core and outer", "sphere.core")
            return GrinSphere(
                radius, _model(s["core"], "sphere.core"), _model(s["outer"], "sphere.outer"), medium
            )
        return GrinSphere.homogeneous(radius, _model(s["material"], "sphere.material"), medium)

    def pupil(self) -> PupilMask:
        return mask_from_dict(self.data["pupil"])

    def trace(self) -> TraceConfig:
        t = self.data["trace"]
        try:
            return TraceConfig(
                n_rays=int(t["n_rays"]),
                ds=None if t["ds"] is None else float(t["ds"]),
                source_position=tuple(float(x) for x in t["source_position"]),
                emission=t["emission"],
                half_angle=None if t["half_angle"] is None else float(t["half_angle"]),
                n_per_axis=int(t["n_per_axis"]),
                seed=self.seed,
                threads=self.threads,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad trace settings: {exc}", "trace") from None

    def grid(self) -> RetinaGrid:
        r = self.data["retina"]
        return RetinaGrid(
            radius=float(self.distances()[0]),
            n_rows=int(r["n_rows"]),
            n_cols=int(r["n_cols"]),
            max_polar=float(r["max_polar"]),
            projection=r["projection"],
        )

    def wavelengths(self) -> np.ndarray:
        lams = np.asarray(self.data["sweep"]["wavelengths"], dtype=float)
        if lams.ndim != 1 or len(lams) == 0 or np.any(np.diff(lams) <= 0):
            raise ConfigError("sweep.wavelengths must be a strictly increasing list", "sweep.wavelengths")
        return lams

    def distances(self) -> np.ndarray:
        d = self.data["sweep"]["distances"]
        if isinstance(d, dict):
            extra = set(d) - {"start", "stop", "num"}
            if extra:
                raise ConfigError(f"unknown keys {sorted(extra)}", "sweep.distances")
            try:
                arr = np.linspace(float(d["start"]), float(d["stop"]), int(d["num"]))
            except KeyError as exc:
                raise ConfigError(f"sweep.distances missing {exc}", "sweep.distances") from None
        else:
            arr = np.atleast_1d(np.asarray(d, dtype=float))
        if len(arr) == 0 or np.any(np.diff(arr) <= 0):
            raise ConfigError("sweep.distances must be strictly increasing", "sweep.distances")
        return arr

    def mapping(self) -> DistanceMapping:
        m = self.data["mapping"]
        offset = float(self.distances()[0]) if m["offset"] is None else float(m["offset"])
        return DistanceMapping(offset, float(m["scale"]))

    def actuator(self) -> ActuatorProfile:
        a = self.data["actuator"]
        pos = self.mapping().to_position(self.distances())
        f_min = float(pos[0]) if a["f_min"] is None else float(a["f_min"])
        f_max = float(pos[-1]) if a["f_max"] is None else float(a["f_max"])
        if f_min < 0:
            raise ConfigError("actuator range must be non-negative", "actuator.f_min")
        return ActuatorProfile(f_min, f_max, float(a["frequency"]), a["waveform"], int(a["n_cycles"]))

    def event_params(self) -> EventSimParams:
        e = self.data["events"]
        dt = e["interpolate_dt_us"]
        return EventSimParams(
            float(e["threshold"]), e["init"], float(e["refractory_us"]), float(e["eps"]),
            None if dt is None else float(dt),
        )

    def composite(self) -> Optional[Dict[float, float]]:
        c = self.data["events"]["composite"]
        return None if c is None else {float(k): float(v) for k, v in c.items()}

    def section(self, name: str) -> dict:
        return self.data[name]

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        """Build every typed view once so errors surface before any compute."""
        if self.data["threads"] is not None and int(self.data["threads"]) < 1:
            raise ConfigError("threads must be >= 1", "threads")
        sphere = self.sphere()
        self.pupil()
        self.trace()
        self.grid()
        self.wavelengths()
        if self.distances()[0] <= sphere.radius:
            raise ConfigError("retina distances must exceed the sphere radius", "sweep.distances")
        a = self.data["actuator"]
        # a single-distance sweep has no derived actuator range; events will refuse it
        if len(self.distances()) > 1 or a["f_min"] is not None or a["f_max"] is not None:
            self.actuator()
        self.event_params()
        self.composite()
        seg = self.data["segment"]
        if seg["mode"] not in ("static", "dynamic"):
            raise ConfigError(f"unknown segmentation mode {seg['mode']!r}", "segment.mode")
        if int(seg["window"]) < 1:
            raise ConfigError("segment.window must be >= 1", "segment.window")
        fmts = self.data["events"]["formats"]
        if not set(fmts) <= {"csv", "bin"} or not fmts:
            raise ConfigError("events.formats must list csv and/or bin", "events.formats")

    def resolved(self) -> dict:
        """Plain-data copy with derived values filled in (threads omitted)."""
        out = copy.deepcopy(self.data)
        out.pop("threads", None)
        out["sweep"]["distances"] = [float(x) for x in self.distances()]
        if len(self.distances()) > 1:
            a = self.actuator()
            out["actuator"]["f_min"], out["actuator"]["f_max"] = a.f_min, a.f_max
        out["mapping"]["offset"] = self.mapping().offset
        return _plain(out)

    def dump_resolved(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.resolved(), fh, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {(float(k) if isinstance(k, (np.floating,)) else k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _positive(v, field):
    try:
        v = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{field} must be a number", field) from None
    if not v > 0:
        raise ConfigError(f"{field} must be positive", field)
    return v


def _model(spec, field):
    try:
        return D.model_from_dict(spec)
    except ConfigError as exc:
        raise ConfigError(str(exc), field) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{field}: {exc}", field) from None


def list_presets() -> List[str]:
    return sorted(D.PRESETS)
