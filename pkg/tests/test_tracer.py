import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chromafocus import dispersion as D
from chromafocus.errors import ConfigError, OutOfSphere, TotalInternalReflection
from chromafocus.pupil import CircularHole, FullAperture
from chromafocus.tracer import (
    GrinSphere,
    Ray,
    TraceConfig,
    axial_crossings,
    grin_gradient,
    grin_index,
    refract,
    step_inside,
    trace_point_source,
    trace_rays,
    with_threads,
)

GRIN = GrinSphere(10.0, D.Constant(n=1.52), D.Constant(n=1.38))
SYN = GrinSphere(30.0, D.SYNTHETIC_CORE, D.SYNTHETIC_OUTER, D.SYNTHETIC_MEDIUM)


def test_grin_index_examples():
    assert grin_index(GRIN, 0.0, 550) == pytest.approx(1.52)
    assert grin_index(GRIN, 10.0, 550) == pytest.approx(1.38)
    # 1.52 / (1 + (1.52 / 1.38 - 1) / 4) evaluated by hand: 1.482403
    assert grin_index(GRIN, 5.0, 550) == pytest.approx(1.482403, abs=1e-6)
    with pytest.raises(OutOfSphere):
        grin_index(GRIN, 10.5, 550)


def test_gradient_zero_at_centre_and_inward():
    assert np.allclose(grin_gradient(GRIN, [0, 0, 0], 550), 0.0)
    x = np.array([3.0, -2.0, 4.0])
    g = grin_gradient(GRIN, x, 550)
    assert g @ x < 0
    assert np.allclose(np.cross(g, x), 0.0, atol=1e-15)


def test_gradient_finite_difference():
    R = GRIN.radius
    x = np.array([R / 3, 0.0, 0.0])
    h = 1e-6 * R
    fd = (grin_index(GRIN, x[0] + h, 550) - grin_index(GRIN, x[0] - h, 550)) / (2 * h)
    assert grin_gradient(GRIN, x, 550)[0] == pytest.approx(fd, rel=1e-6)


def test_gradient_outside_raises():
    with pytest.raises(OutOfSphere):
        grin_gradient(GRIN, [10.0, 0.0, 0.0], 550)


def test_refract_normal_incidence_and_matched_index():
    e = np.array([0.0, 0.0, 1.0])
    assert np.allclose(refract(e, [0, 0, -1], 1.0, 1.5), e)
    e2 = np.array([np.sin(0.4), 0.0, np.cos(0.4)])
    assert np.allclose(refract(e2, [0, 0, -1], 1.33, 1.33), e2)


def test_refract_snell_and_tir():
    t = math.radians(30)
    e = np.array([math.sin(t), 0.0, math.cos(t)])
    out = refract(e, [0, 0, 1], 1.0, 1.5)  # normal flipped internally
    assert math.asin(out[0]) == pytest.approx(math.asin(math.sin(t) / 1.5))
    t = math.radians(60)
    with pytest.raises(TotalInternalReflection):
        refract(np.array([math.sin(t), 0.0, math.cos(t)]), [0, 0, -1], 1.5, 1.0)


@given(st.floats(0.0, 1.5), st.floats(1.0, 2.0), st.floats(1.0, 2.0))
def test_refract_unit_norm(angle, n1, n2):
    e = np.array([math.sin(angle), 0.0, math.cos(angle)])
    try:
        out = refract(e, [0.0, 0.0, -1.0], n1, n2)
    except TotalInternalReflection:
        assert n1 / n2 * math.sin(angle) > 1 - 1e-12
        return
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)


def test_step_straight_in_uniform_sphere():
    s = GrinSphere.homogeneous(10.0, 1.5)
    e0 = np.array([0.6, 0.0, 0.8])
    ray = Ray(np.zeros(3), e0)
    for _ in range(10):
        ray = step_inside(s, ray, 550, 0.1)
    assert np.allclose(ray.position, 10 * 0.1 * e0, atol=1e-14)
    assert np.allclose(ray.direction, e0)


def test_step_bends_toward_centre():
    ray = Ray(np.array([5.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    for _ in range(20):
        nxt = step_inside(GRIN, ray, 550, 0.01)
        inward = -nxt.position / np.linalg.norm(nxt.position)
        assert (nxt.direction - ray.direction) @ inward > 0
        ray = nxt


def test_single_axial_ray_undeviated():
    s = GrinSphere.homogeneous(50.0, 1.5)
    # emission confined to entry heights of ~1e-7 mm so rays clear the pinhole
    cfg = TraceConfig(n_rays=50, half_angle=math.degrees(1e-16), threads=1)
    tr = trace_point_source(s, CircularHole(1e-4), cfg, 550)
    assert tr.counts["exited"] == 50
    assert np.allclose(tr.exit_directions, [0.0, 0.0, 1.0], atol=1e-8)


def test_paraxial_bfl_small_run():
    s = GrinSphere.homogeneous(50.0, 1.5)
    half = math.degrees(math.atan(1.0 / 1e9))  # entry heights up to 0.02 R
    tr = trace_point_source(s, FullAperture(), TraceConfig(n_rays=2000, half_angle=half, threads=1), 550)
    bfl = np.nanmean(axial_crossings(tr)) - 50.0
    assert bfl == pytest.approx(25.0, rel=0.02)


def test_spherical_aberration_ordering():
    s = GrinSphere.homogeneous(50.0, 1.5)
    h = np.linspace(2.0, 40.0, 12)
    origins = np.stack([h, np.zeros_like(h), np.full_like(h, -100.0)], 1)
    dirs = np.tile([0.0, 0.0, 1.0], (len(h), 1))
    status, _, p, d = trace_rays(s, origins, dirs, 550)
    z = p[:, 2] - p[:, 0] * d[:, 2] / d[:, 0]
    assert np.all(np.diff(z) < 0)


def test_accounting_and_unit_norm():
    cfg = TraceConfig(n_rays=5000, threads=1)
    tr = trace_point_source(SYN, CircularHole(40.0), cfg, 500)
    c = tr.counts
    assert c["emitted"] == c["blocked"] + c["totally_reflected"] + c["escaped"] + c["exited"]
    assert c["blocked"] > 0
    assert np.allclose(np.linalg.norm(tr.exit_directions, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(tr.exit_points, axis=1), SYN.radius, atol=1e-8)


def test_thread_count_does_not_change_output():
    cfg = TraceConfig(n_rays=4000, threads=1)
    a = trace_point_source(SYN, FullAperture(), cfg, 600)
    b = trace_point_source(SYN, FullAperture(), with_threads(cfg, 4), 600)
    assert a.exit_points.tobytes() == b.exit_points.tobytes()
    assert a.exit_directions.tobytes() == b.exit_directions.tobytes()
    assert a.counts == b.counts


def reversal_error(sphere, ds):
    cfg = TraceConfig(n_rays=200, threads=1, ds=ds)
    tr = trace_point_source(sphere, FullAperture(), cfg, 550)
    start = tr.exit_points + 5.0 * tr.exit_directions
    _, _, back, _ = trace_rays(sphere, start, -tr.exit_directions, 550, ds=ds)
    return np.nanmax(np.linalg.norm(back - tr.entry_points, axis=1))


def test_reversibility_homogeneous():
    s = GrinSphere.homogeneous(30.0, 1.5)
    assert reversal_error(s, s.radius / 1000) < 1e-4


def test_reversibility_graded():
    assert reversal_error(SYN, SYN.radius / 1000) < 1e-4


def test_reversal_error_is_first_order():
    e1, e2 = (reversal_error(SYN, SYN.radius / k) for k in (1000, 2000))
    assert 1.5 <= e1 / e2 <= 2.5


def test_first_order_convergence_small():
    R = SYN.radius
    h = np.linspace(0.1, 0.8, 8) * R
    o = np.stack([h, np.zeros_like(h), np.full_like(h, -100.0)], 1)
    d = np.tile([0.0, 0.0, 1.0], (len(h), 1))

    def land(ds):
        _, _, p, e = trace_rays(SYN, o, d, 550, ds=ds)
        return p + ((80.0 - p[:, 2]) / e[:, 2])[:, None] * e

    ref = land(R / 64000)
    e1, e2 = (np.mean(np.linalg.norm(land(R / k) - ref, axis=1)) for k in (500, 1000))
    assert 1.5 <= e1 / e2 <= 2.5


def test_config_errors():
    with pytest.raises(ConfigError):
        TraceConfig(emission="spiral")
    with pytest.raises(ConfigError):
        trace_point_source(SYN, FullAperture(), TraceConfig(source_position=(0, 0, -10.0)), 550)
    with pytest.raises(ConfigError):
        trace_rays(SYN, [[0, 0, -100]], [[0, 0, 1]], 550, ds=1.0)


def test_grid_emission_is_deterministic():
    cfg = TraceConfig(emission="grid", n_per_axis=21, threads=1)
    a = trace_point_source(SYN, FullAperture(), cfg, 550)
    b = trace_point_source(SYN, FullAperture(), cfg, 550)
    assert a.counts == b.counts and np.array_equal(a.exit_points, b.exit_points)
    assert a.metadata["emission"] == "grid"
