import numpy as np
import pytest

from spectral_nlctf.geometry import FanBeamGeometry


def small_geometry(n=64, n_views=48, n_det=97):
    return FanBeamGeometry(sod=100.0, sdd=150.0, n_det=n_det, det_pitch=0.6,
                           n_views=n_views, n_w=n, n_h=n, pixel_size=0.5)


def grid_argmin(d, gamma, eps, step=1e-4):
    """Brute-force minimizer of gamma*log-sum + (c-d)^2/2 on a 1-D grid."""
    c1 = -1.0 / np.log(eps)
    hi = abs(d)
    grid = np.arange(0.0, hi + step, step)
    f = gamma * c1 * np.log1p(grid / eps) + 0.5 * (grid - hi) ** 2
    return np.sign(d) * grid[np.argmin(f)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def geom_small():
    return small_geometry()


# one PASS/FAIL line per acceptance criterion, printed after the test run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
