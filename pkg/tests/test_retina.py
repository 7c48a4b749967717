import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chromafocus import dispersion as D
from chromafocus.errors import ConfigError, InsufficientDistances, ParseError, WavelengthNotInStack
from chromafocus.pupil import FullAperture
from chromafocus.retina import (
    IntensityStack,
    RetinaGrid,
    accumulate,
    composite_planes,
    image_point,
    peak_profile,
    peak_profiles_csv,
    radial_log_gradient,
    read_stack,
    sweep,
    write_stack,
)
from chromafocus.tracer import GrinSphere, TraceConfig, trace_point_source, with_threads

UNIFORM = GrinSphere.homogeneous(50.0, 1.5)


def paraxial_trace(n_rays=3000):
    half = math.degrees(math.atan(1.0 / 1e9))
    return trace_point_source(UNIFORM, FullAperture(), TraceConfig(n_rays=n_rays, half_angle=half, threads=1), 550)


def test_single_axial_ray_lands_on_axis_bin():
    grid = RetinaGrid(radius=80.0)
    plane, missed = accumulate(([[0.0, 0.0, 50.0]], [[0.0, 0.0, 1.0]]), grid)
    assert plane.sum() == 1 and missed == 0
    r, c = np.unravel_index(np.argmax(plane), plane.shape)
    theta, _ = grid.pixel_polar()
    assert theta[r, c] == theta.min()
    assert (r, c) == (math.floor(image_point(grid, (0, 0, -1e9))[0]),) * 2


def test_zero_rays_zero_plane():
    plane, missed = accumulate((np.empty((0, 3)), np.empty((0, 3))), RetinaGrid(radius=80.0))
    assert plane.shape == (256, 256) and plane.sum() == 0 and missed == 0


def test_axial_equirectangular_row_zero():
    grid = RetinaGrid(radius=80.0, projection="equirectangular")
    plane, _ = accumulate(([[0.0, 0.0, 50.0]], [[0.0, 0.0, 1.0]]), grid)
    assert plane[0].sum() == 1


def test_paraxial_focus_concentrates():
    tr = paraxial_trace()
    peaks = {}
    for d in (65.0, 75.0, 85.0):
        plane, _ = accumulate(tr, RetinaGrid(radius=d, max_polar=2.0))
        peaks[d] = plane.max()
    assert peaks[75.0] > peaks[65.0] and peaks[75.0] > peaks[85.0]


def test_energy_bookkeeping(small_stack):
    counts = small_stack.metadata["ray_counts"]
    missed = np.asarray(small_stack.metadata["missed"])
    totals = small_stack.planes.reshape(*small_stack.planes.shape[:2], -1).sum(axis=2, dtype=np.int64)
    for i, c in enumerate(counts):
        assert np.all(totals[i] + missed[i] == c["exited"])


def test_full_hemisphere_misses_nothing():
    tr = paraxial_trace()
    _, missed = accumulate(tr, RetinaGrid(radius=150.0))
    assert missed == 0


def test_retina_inside_sphere_rejected():
    with pytest.raises(ConfigError):
        accumulate(paraxial_trace(10), RetinaGrid(radius=40.0), sphere_radius=50.0)


def test_sweep_single_plane_is_accumulate():
    cfg = TraceConfig(n_rays=2000, threads=1)
    grid = RetinaGrid(radius=70.0, n_rows=32, n_cols=32, max_polar=30.0)
    st_ = sweep(UNIFORM, FullAperture(), cfg, [550.0], [70.0], grid)
    plane, _ = accumulate(trace_point_source(UNIFORM, FullAperture(), cfg, 550.0), grid)
    assert st_.planes.shape == (1, 1, 32, 32)
    assert np.array_equal(st_.planes[0, 0], plane)


def test_constant_index_argmax_identical():
    cfg = TraceConfig(n_rays=5000, threads=1)
    grid = RetinaGrid(radius=60.0, n_rows=64, n_cols=64, max_polar=30.0)
    d = np.linspace(60, 90, 16)
    st_ = sweep(UNIFORM, FullAperture(), cfg, [450.0, 650.0], d, grid)
    am = [np.argmax(peak_profile(st_, lam)[1]) for lam in (450.0, 650.0)]
    assert abs(am[0] - am[1]) <= 1


def test_chromatic_argmax_order(small_stack):
    am = [small_stack.distances[np.argmax(peak_profile(small_stack, lam)[1])] for lam in small_stack.wavelengths]
    assert np.all(np.diff(am) >= 0)


def test_stack_independent_of_threads():
    cfg = TraceConfig(n_rays=3000, threads=1)
    grid = RetinaGrid(radius=60.0, n_rows=32, n_cols=32, max_polar=30.0)
    d = [60.0, 70.0]
    a = sweep(UNIFORM, FullAperture(), cfg, [500.0], d, grid)
    b = sweep(UNIFORM, FullAperture(), with_threads(cfg, 3), [500.0], d, grid)
    assert a == b


def test_peak_profile_examples():
    planes = np.zeros((1, 3, 8, 8), dtype=np.uint32)
    st_ = IntensityStack(np.array([500.0]), np.array([1.0, 2.0, 3.0]), planes, {})
    assert np.all(peak_profile(st_, 500.0)[1] == 0)
    assert np.all(peak_profile(st_, 500.0, normalize=True)[1] == 0)
    one = np.zeros((1, 1, 8, 8), dtype=np.uint32)
    one[0, 0, 3, 4] = 42
    d, p = peak_profile(IntensityStack(np.array([500.0]), np.array([7.0]), one, {}), 500.0)
    assert list(zip(d, p)) == [(7.0, 42.0)]
    with pytest.raises(WavelengthNotInStack):
        peak_profile(st_, 600.0)


def test_normalized_profile_scale():
    _, p = peak_profile(_random_stack(0), 450.0, normalize=True)
    assert p.max() == 1.0


def _random_stack(seed, n_dist=6):
    rng = np.random.default_rng(seed)
    planes = rng.integers(0, 50, size=(2, n_dist, 16, 16)).astype(np.uint32)
    grid = RetinaGrid(radius=60.0, n_rows=16, n_cols=16, max_polar=30.0).to_dict()
    return IntensityStack(np.array([450.0, 650.0]), np.linspace(60, 70, n_dist), planes, {"grid": grid})


def test_composite_is_linear():
    st_ = _random_stack(1)
    both = composite_planes(st_, {450.0: 2.0, 650.0: 0.5})
    assert np.allclose(both, 2.0 * st_.planes[0] + 0.5 * st_.planes[1])


def test_radial_gradient_constant_stack_is_zero():
    st_ = _random_stack(2)
    st_.planes[:] = st_.planes[:, :1]
    assert np.allclose(radial_log_gradient(st_, 450.0), 0.0)


def test_radial_gradient_needs_two_distances():
    st_ = _random_stack(3, n_dist=1)
    with pytest.raises(InsufficientDistances):
        radial_log_gradient(st_, 450.0)


def test_radial_gradient_single_sign_change_through_focus():
    tr = paraxial_trace(4000)
    grid = RetinaGrid(radius=60.0, n_rows=64, n_cols=64, max_polar=1.0)
    d = np.linspace(60.0, 90.0, 31)
    st_ = sweep(UNIFORM, FullAperture(), TraceConfig(), [550.0], d, grid, traces=[tr])
    centre = radial_log_gradient(st_, 550.0)[:, 0]
    # the spot saturates the axis bin near focus; ignore that plateau
    signs = np.sign(centre[np.abs(centre) > 0.05 * np.abs(centre).max()])
    assert np.count_nonzero(np.diff(signs)) == 1
    assert signs[0] > 0 and signs[-1] < 0


def test_stack_roundtrip(tmp_path, small_stack):
    p = tmp_path / "s.cphstk"
    write_stack(small_stack, p)
    raw = p.read_bytes()
    assert raw[:8] == b"CPHSTK01"
    back = read_stack(p)
    assert back == small_stack
    write_stack(back, tmp_path / "t.cphstk")
    assert (tmp_path / "t.cphstk").read_bytes() == raw


def test_stack_bad_files(tmp_path, small_stack):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTASTACK")
    with pytest.raises(ParseError):
        read_stack(p)
    write_stack(small_stack, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ParseError):
        read_stack(p)


def test_peak_csv(small_stack):
    lines = peak_profiles_csv(small_stack).splitlines()
    assert lines[0] == "lambda_nm,distance_mm,peak,total"
    assert len(lines) == 1 + small_stack.planes.shape[0] * small_stack.planes.shape[1]


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 89.0), st.floats(-180.0, 180.0))
def test_image_point_matches_binning(theta, phi):
    grid = RetinaGrid(radius=80.0, n_rows=64, n_cols=64, max_polar=90.0)
    t, p = math.radians(theta), math.radians(phi)
    d = np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])
    plane, _ = accumulate(([[0.0, 0.0, 0.0]], [d]), grid)
    r, c = image_point(grid, -d)
    hit = np.argwhere(plane)[0]
    assert abs(hit[0] + 0.5 - r) <= 0.5 + 1e-9 and abs(hit[1] + 0.5 - c) <= 0.5 + 1e-9


def test_radial_extent_and_encircled_energy():
    from chromafocus.retina import encircled_energy_radius

    st_ = _random_stack(5)
    full = radial_log_gradient(st_, 450.0)
    part = radial_log_gradient(st_, 450.0, max_radius=15.0)
    assert part.shape[1] == full.shape[1] // 2
    r = encircled_energy_radius(st_, 450.0, 1.0)
    theta, _ = st_.grid().pixel_polar()
    assert r == pytest.approx(theta.max())
    assert encircled_energy_radius(st_, 450.0, 0.1) < r
    with pytest.raises(ConfigError):
        radial_log_gradient(st_, 450.0, max_radius=45.0)
