import numpy as np
import pytest

from chromafocus import dispersion as D
from chromafocus.pupil import FullAperture
from chromafocus.retina import RetinaGrid, sweep
from chromafocus.tracer import GrinSphere, TraceConfig


@pytest.fixture(scope="session")
def bk7_sphere():
    return GrinSphere.homogeneous(50.0, D.N_BK7)


@pytest.fixture(scope="session")
def small_stack(bk7_sphere):
    """Cheap three-wavelength BK7 sweep on a coarse raster."""
    grid = RetinaGrid(radius=60.0, n_rows=64, n_cols=64, max_polar=30.0)
    cfg = TraceConfig(n_rays=20_000, threads=1)
    return sweep(
        bk7_sphere, FullAperture(), cfg, [450.0, 550.0, 650.0], np.linspace(60.0, 76.0, 24), grid
    )


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", []):
                if name == "criterion":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
