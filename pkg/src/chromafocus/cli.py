"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 missing upstream artifact, 5 algorithm failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import analysis as A
from . import events as E
from . import retina as RT
from . import segment as S
from .config import RunConfig, load_config
from .errors import ChromaFocusError, ConfigError, MissingFocalField, ParseError, UpstreamMissing
from .tracer import TraceResult, trace_point_source

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_UPSTREAM, EXIT_ALGO = 0, 2, 3, 4, 5

STACK_FILE = "stack.cphstk"
TRACES_FILE = "traces.npz"
PEAKS_FILE = "peak_profiles.csv"
FRAME_ETA_FILE = "resolving_power_frame.csv"
EVENT_ETA_FILE = "resolving_power_events.csv"
RESOLVED_FILE = "config.resolved.yaml"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _tag(lam: float) -> str:
    return f"{lam:g}nm"


def _need(path: Path) -> Path:
    if not path.exists():
        raise UpstreamMissing(f"missing upstream artifact {path}")
    return path


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- commands -------------------------------------------------------------------


def cmd_trace(cfg: RunConfig, out: Path) -> None:
    sphere, mask, tcfg = cfg.sphere(), cfg.pupil(), cfg.trace()
    lams = cfg.wavelengths()
    traces = []
    for lam in lams:
        t0 = time.perf_counter()
        tr = trace_point_source(sphere, mask, tcfg, float(lam))
        _log(f"traced {lam:g} nm: {tr.counts} in {time.perf_counter() - t0:.1f} s")
        print(json.dumps({"wavelength_nm": float(lam), **tr.counts}, sort_keys=True))
        traces.append(tr)
    arrays = {}
    for lam, tr in zip(lams, traces):
        arrays[f"{_tag(lam)}_points"] = tr.exit_points
        arrays[f"{_tag(lam)}_dirs"] = tr.exit_directions
        arrays[f"{_tag(lam)}_meta"] = np.frombuffer(
            json.dumps(tr.metadata, sort_keys=True).encode(), dtype=np.uint8
        )
    np.savez(out / TRACES_FILE, **arrays)
    _accumulate(cfg, out, traces)


def _load_traces(cfg: RunConfig, out: Path) -> List[TraceResult]:
    data = np.load(_need(out / TRACES_FILE))
    traces = []
    for lam in cfg.wavelengths():
        key = _tag(lam)
        if f"{key}_points" not in data:
            raise UpstreamMissing(f"{out / TRACES_FILE} has no trace for {lam:g} nm")
        meta = json.loads(bytes(data[f"{key}_meta"]).decode())
        pts = data[f"{key}_points"]
        traces.append(
            TraceResult(pts, data[f"{key}_dirs"], np.empty((0, 3)), np.arange(len(pts)), meta["counts"], meta)
        )
    return traces


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    _accumulate(cfg, out, _load_traces(cfg, out))


def _accumulate(cfg: RunConfig, out: Path, traces) -> None:
    stack = RT.sweep(
        cfg.sphere(), cfg.pupil(), cfg.trace(), cfg.wavelengths(), cfg.distances(), cfg.grid(), traces
    )
    RT.write_stack(stack, out / STACK_FILE)
    _write_text(out / PEAKS_FILE, RT.peak_profiles_csv(stack))
    _log(f"wrote {out / STACK_FILE} with {stack.planes.shape[0] * stack.planes.shape[1]} planes")


def cmd_events(cfg: RunConfig, out: Path) -> None:
    stack = RT.read_stack(_need(out / STACK_FILE))
    profile, params, mapping = cfg.actuator(), cfg.event_params(), cfg.mapping()
    jobs = [(_tag(lam), float(lam)) for lam in stack.wavelengths]
    comp = cfg.composite()
    if comp is not None:
        jobs.append(("composite", comp))
    fmts = cfg.section("events")["formats"]
    for name, spectrum in jobs:
        ev = E.synthesize_events(stack, spectrum, profile, params, mapping)
        if "csv" in fmts:
            E.write_events_csv(ev, out / f"events_{name}.csv")
        if "bin" in fmts:
            E.write_events_bin(ev, out / f"events_{name}.bin")
        _log(f"events {name}: {len(ev)}")


def _event_file(out: Path, name: str) -> Optional[Path]:
    for ext in ("bin", "csv"):
        p = out / f"events_{name}.{ext}"
        if p.exists():
            return p
    return None


def cmd_analyze(cfg: RunConfig, out: Path) -> None:
    stack = RT.read_stack(_need(out / STACK_FILE))
    a = cfg.section("analysis")
    opts = dict(
        max_wavelength=a["max_wavelength"],
        smooth=int(a["smooth"]),
        refine=bool(a["refine"]),
        max_slope=float(a["max_slope"]),
        degenerate="nan",
    )
    rows = A.resolving_power_table(A.frame_profiles(stack), **opts)
    if any(math.isnan(r.delta_lambda) for r in rows):
        _log("warning: some frame-path rows have no defined spectral width")
    _write_text(out / FRAME_ETA_FILE, A.resolving_power_csv(rows))
    files = {lam: _event_file(out, _tag(lam)) for lam in stack.wavelengths}
    if all(files.values()):
        mapping = cfg.mapping()
        edges = A.plane_edges_um(stack.distances, mapping)
        center = RT.image_point(stack.grid(), cfg.trace().source_position)
        profiles = []
        for lam, path in files.items():
            ev = E.read_events_bin(path) if path.suffix == ".bin" else E.read_events_csv(path)
            if a["event_roi"] is not None:
                ev = A.events_in_window(ev, center, float(a["event_roi"]))
            profiles.append(A.event_profile(ev, lam, edges, mapping))
        erows = A.resolving_power_table(profiles, **opts)
        _write_text(out / EVENT_ETA_FILE, A.resolving_power_csv(erows))
    _log(f"wrote {out / FRAME_ETA_FILE}")


def cmd_calibrate(cfg: RunConfig, out: Path) -> None:
    c = cfg.section("calibrate")
    if c["input"] is None:
        raise ConfigError("calibrate.input must name a CSV of lambda_nm,qe,p_full_nw", "calibrate.input")
    rows = A.read_calibration_csv(c["input"])
    table = A.calibration_targets(rows, float(c["p_dark"]), float(c["reference"]))
    _write_text(out / "calibration.csv", A.calibration_csv(table))
    _log(f"wrote {out / 'calibration.csv'} ({len(table)} rows)")


def _calibration_map(cfg: RunConfig, out: Path) -> S.FocalCalibrationMap:
    seg = cfg.section("segment")
    if seg["calibration"] is not None:
        entries = [(str(e["label"]), float(e["wavelength"]), float(e["position"])) for e in seg["calibration"]]
        return S.FocalCalibrationMap.from_entries(entries)
    path = _need(out / FRAME_ETA_FILE)
    mapping = cfg.mapping()
    entries = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            lam, f0 = (float(x) for x in line.split(",")[:2])
            entries.append((_tag(lam), lam, float(mapping.to_position(f0))))
    return S.FocalCalibrationMap.from_entries(entries)


def cmd_segment(cfg: RunConfig, out: Path) -> None:
    seg = cfg.section("segment")
    src = Path(seg["events"]) if seg["events"] else _event_file(out, "composite")
    if src is None:
        raise UpstreamMissing("no composite event stream; set events.composite or segment.events")
    ev = E.read_events_bin(_need(src)) if src.suffix == ".bin" else E.read_events_csv(_need(src))
    calib = _calibration_map(cfg, out)
    grid = cfg.grid()
    act = cfg.actuator()
    result = S.segment_sweep(
        ev,
        calib,
        (grid.n_rows, grid.n_cols),
        int(seg["window"]),
        S.velocity_grid(float(seg["velocity_limit"]), int(seg["velocity_steps"])),
        seg["mode"],
        float(seg["dwell_fraction"]),
        (act.f_min, act.f_max),
    )
    S.labeled_events_csv(ev, result, out / "labeled_events.csv")
    for k, mask in zip(calib.visit_order, result.masks):
        if mask is not None:
            S.write_pgm(mask, out / f"mask_{calib.labels[k]}.pgm")
    n_lab = int(np.sum(result.labels >= 0))
    _log(f"labeled {n_lab} of {len(ev)} events")


def cmd_spectrum(cfg: RunConfig, out: Path) -> None:
    stack = RT.read_stack(_need(out / STACK_FILE))
    sp = cfg.section("spectrum")
    for name, weights in sp["composites"].items():
        spectrum = {float(k): float(v) for k, v in weights.items()}
        g = RT.radial_log_gradient(
            stack, spectrum, float(sp["eps"]),
            None if sp["azimuth_slice"] is None else tuple(sp["azimuth_slice"]),
            sp["n_radial"],
            None if sp["max_radius"] is None else float(sp["max_radius"]),
        )
        lines = ["distance_mm," + ",".join(f"r{i}" for i in range(g.shape[1]))]
        for d, row in zip(stack.distances, g):
            lines.append(",".join([repr(float(d))] + [repr(float(v)) for v in row]))
        _write_text(out / f"spectrum_{name}.csv", "\n".join(lines) + "\n")
    _log(f"wrote {len(sp['composites'])} spectrum maps")


COMMANDS = {
    "trace": cmd_trace,
    "sweep": cmd_sweep,
    "events": cmd_events,
    "analyze": cmd_analyze,
    "calibrate": cmd_calibrate,
    "segment": cmd_segment,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chromafocus", description="Colour-from-focus simulator and analysis.")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--seed", type=int, help="seed for emission sequences")
    p.add_argument("command", choices=sorted(COMMANDS))
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"threads": args.threads, "seed": args.seed})
    except ConfigError as exc:
        _log(f"config error [{exc.field}]: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _log(f"cannot read config: {exc}")
        return EXIT_IO
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump_resolved(out / RESOLVED_FILE)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        _log(f"config error [{exc.field}]: {exc}")
        return EXIT_CONFIG
    except UpstreamMissing as exc:
        _log(f"upstream artifact missing: {exc}")
        return EXIT_UPSTREAM
    except (ParseError, MissingFocalField, OSError) as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    except ChromaFocusError as exc:
        _log(f"{type(exc).__name__}: {exc}")
        return EXIT_ALGO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
