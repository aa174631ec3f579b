import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from heflow.geometry import TorusGeometry

settings.register_profile("heflow", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("heflow")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_torus():
    return TorusGeometry(1j, 1.0, 32)


@pytest.fixture
def skew_torus():
    return TorusGeometry(0.3 + 1.2j, 2.0, 32)


def smooth_scalar(geometry, seed=0, band=3, complex_values=False):
    """Band-limited random periodic function; the same function on every grid."""
    rng = np.random.default_rng(seed)
    k = np.arange(-band, band + 1)
    coef = rng.standard_normal((k.size, k.size)) + 1j * rng.standard_normal((k.size, k.size))
    x, y = geometry.mesh
    phase = np.exp(2j * np.pi * (k[:, None, None, None] * x[None, None] + k[None, :, None, None] * y[None, None]))
    f = np.tensordot(coef, phase, axes=([0, 1], [0, 1])) / k.size
    return f if complex_values else f.real


def random_hermitian(rng, shape, r, scale=1.0):
    a = rng.standard_normal(shape + (r, r)) + 1j * rng.standard_normal(shape + (r, r))
    return scale * 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def random_unitary(rng, r):
    q, rr = np.linalg.qr(rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r)))
    return q * (np.diag(rr) / np.abs(np.diag(rr)))


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(CRITERIA[key])
