import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heflow.geometry import (
    CHECKPOINT_MAGIC,
    TorusGeometry,
    TwistedMatrixField,
    dbar,
    fd_symbol,
    hat_phase,
    integrate,
    lambda_contract,
    laplacian,
    load_field,
    multiplier,
    pad_y,
    partial_conn,
    poisson_solve,
    save_field,
    theta_section,
    twist_from_degrees,
)
from heflow.higgs import MetricState, random_state

from conftest import smooth_scalar


def _order(errors, ns):
    return np.polyfit(np.log(ns), np.log(errors), 1)[0]


# --- geometry and fields -------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(tau=-1j), dict(c=0.0), dict(grid_n=6), dict(grid_n=15)])
def test_geometry_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        TorusGeometry(**kw)


def test_twist_must_be_antisymmetric(unit_torus):
    n = unit_torus.grid_n
    with pytest.raises(ValueError, match="antisymmetric"):
        TwistedMatrixField(unit_torus, np.zeros((n, n, 2, 2)), [[0, 1], [1, 0]])


def test_field_rejects_non_finite_with_location(unit_torus):
    n = unit_torus.grid_n
    v = np.zeros((n, n, 1, 1))
    v[3, 4] = np.nan
    with pytest.raises(FloatingPointError, match=r"\(3, 4, 0, 0\)"):
        TwistedMatrixField(unit_torus, v)


def test_product_adds_twists(unit_torus):
    # Hom(L_b, L_a) composed with Hom(L_c, L_b) lands in Hom(L_c, L_a)
    n = unit_torus.grid_n
    d = (2, -1, 0)
    tw = twist_from_degrees(d)
    f = TwistedMatrixField(unit_torus, np.ones((n, n, 3, 3)), tw)
    g = f @ f
    np.testing.assert_array_equal(g.twist, tw)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                assert tw[i, k] + tw[k, j] == g.twist[i, j]
    bad = TwistedMatrixField(unit_torus, np.ones((n, n, 3, 3)), twist_from_degrees((0, 1, 5)))
    with pytest.raises(ValueError):
        f @ bad.with_values(bad.values)  # twists of different bundles do not compose consistently
    with pytest.raises(ValueError):
        f + bad


# --- integration ----------------------------------------------------------------------


def test_integrate_examples():
    g2 = TorusGeometry(2j, 1.0, 16)
    assert integrate(np.ones((16, 16)), g2) == pytest.approx(2.0, rel=1e-12)
    g1 = TorusGeometry(1j, 1.0, 16)
    x, _ = g1.mesh
    assert abs(integrate(np.real(np.exp(2j * np.pi * x)), g1)) < 1e-14
    assert integrate(np.sin(2 * np.pi * x) ** 2, g1) == pytest.approx(0.5, rel=1e-12)


@given(st.integers(-7, 7), st.integers(-7, 7), st.floats(0.1, 3.0), st.floats(-1, 1))
def test_quadrature_exact_on_resolved_modes(k, l, c, re_tau):
    g = TorusGeometry(complex(re_tau, 0.8), c, 16)
    x, y = g.mesh
    val = integrate(np.exp(2j * np.pi * (k * x + l * y)), g)
    want = g.volume if k == 0 and l == 0 else 0.0
    assert abs(val - want) <= 1e-12 * g.volume


def test_integrate_rejects_non_finite(unit_torus):
    f = np.zeros((32, 32))
    f[1, 2] = np.inf
    with pytest.raises(FloatingPointError, match=r"\(1, 2\)"):
        integrate(f, unit_torus)


# --- dbar -------------------------------------------------------------------------------


def test_dbar_of_constant_is_zero(unit_torus):
    f = TwistedMatrixField.constant(unit_torus, [[1.0, 2.0], [3.0, 4.0]])
    out = dbar(f)
    assert out.form_type == (0, 1)
    assert np.max(np.abs(out.values)) < 1e-12


@pytest.mark.parametrize("k,l", [(1, 0), (0, 1), (2, -1), (1, 3)])
def test_dbar_fourier_mode(k, l):
    errs = []
    ns = (16, 32, 64)
    for n in ns:
        g = TorusGeometry(1j, 1.0, n)
        x, y = g.mesh
        f = np.exp(2j * np.pi * (k * x + l * y))
        got = dbar(TwistedMatrixField.scalar(g, f)).values[..., 0, 0]
        want = np.pi * 1j * (k + 1j * l) * f
        errs.append(np.max(np.abs(got - want)))
    assert errs[1] < 1e-2 * np.pi * abs(k + 1j * l)
    assert abs(_order(errs, ns) + 4) < 0.5


def _theta_field(g, m, j=0):
    # entry (0, 1) of End(L_m + L_0) is a section of L_m
    n = g.grid_n
    v = np.zeros((n, n, 2, 2), complex)
    v[..., 0, 1] = theta_section(g, m, j)
    return TwistedMatrixField(g, v, twist_from_degrees((m, 0)))


@pytest.mark.parametrize("tau", [1j, 0.3 + 1.2j, -0.45 + 0.9j])
@pytest.mark.parametrize("m", [1, 2])
def test_dbar_of_theta_section_converges_at_fourth_order(tau, m):
    ns = (16, 32, 64)
    errs = []
    for n in ns:
        g = TorusGeometry(tau, 1.0, n)
        f = _theta_field(g, m)
        w = g.hat_weights(f.twist)[..., 0, 1]
        scale = np.max(np.abs(f.values[..., 0, 1] * w))
        errs.append(np.max(np.abs(dbar(f).values[..., 0, 1] * w)) / scale)
    assert errs[-1] < 1e-3
    assert abs(_order(errs, ns) + 4) < 0.5


@pytest.mark.parametrize("tau", [1j, 0.3 + 1.2j])
def test_theta_section_obeys_multiplier(tau):
    # continue theta past y = 1 by its series and compare with the seam rule
    g = TorusGeometry(tau, 1.0, 16)
    m = 2
    x, y = g.mesh
    z = x + tau * y
    k = np.arange(-12, 13)[:, None, None]
    shifted = np.exp(1j * np.pi * m * tau * k**2 + 2j * np.pi * m * k * (z + tau)[None]).sum(axis=0)
    np.testing.assert_allclose(
        shifted, multiplier(m, z, tau) * theta_section(g, m), rtol=1e-12, atol=1e-13 * np.abs(shifted).max()
    )


@pytest.mark.parametrize("tau", [1j, 0.3 + 1.2j])
def test_ghost_rows_reproduce_the_continued_section(tau):
    g = TorusGeometry(tau, 1.0, 16)
    n = g.grid_n
    f = _theta_field(g, 1)
    w = g.hat_weights(f.twist)
    padded = pad_y(f.values * w, g, f.twist)[..., 0, 1]
    x = g.x[:, None]

    def hat_theta(yv):
        z = x + tau * yv
        k = np.arange(-12, 13)[:, None, None]
        th = np.exp(1j * np.pi * tau * k**2 + 2j * np.pi * k * z[None]).sum(axis=0)
        return th * np.exp(-np.pi * tau.imag * yv**2)

    for row, yv in ((0, -2), (1, -1), (n + 2, n), (n + 3, n + 1)):
        np.testing.assert_allclose(padded[:, row : row + 1], hat_theta(np.array([[yv / n]])), rtol=1e-11, atol=1e-13)


def test_seam_phase_round_trip():
    # one full period forward then back is the identity, bit for bit
    tau = 0.3 + 1.2j
    x = np.linspace(0, 1, 7, endpoint=False)
    p = hat_phase(3, x, 0.25, tau)
    assert np.all(np.abs(p) == pytest.approx(1.0, abs=1e-15))
    q = 1.0 / hat_phase(3, x, 0.25, tau)
    np.testing.assert_array_equal(np.abs(p * q - 1.0) < 1e-15, True)


@pytest.mark.parametrize("tau", [1j, 0.37 + 0.85j])
def test_integration_by_parts_on_twisted_fields(tau):
    g = TorusGeometry(tau, 1.5, 32)
    tw = twist_from_degrees((1, -1))
    f = random_state(g, seed=1, twist=tw, amplitude=1.0).S
    h = random_state(g, seed=2, twist=tw, amplitude=1.0).S
    lhs = integrate(np.trace(dbar(f).values @ h.values, axis1=2, axis2=3), g)
    rhs = integrate(np.trace(f.values @ dbar(h).values, axis1=2, axis2=3), g)
    scale = integrate(np.abs(np.trace(dbar(f).values @ h.values, axis1=2, axis2=3)), g)
    assert abs(lhs + rhs) <= 1e-12 * scale


# --- partial_conn, Lambda ----------------------------------------------------------------


def test_partial_conn_trivial_cases(unit_torus):
    f = TwistedMatrixField.constant(unit_torus, [[1.0, 2.0], [0.5, -1.0]])
    assert np.max(np.abs(partial_conn(f, TwistedMatrixField.identity(unit_torus, 2)).values)) < 1e-12
    # abelian: the bracket vanishes and only d/dz remains
    g = unit_torus
    s = smooth_scalar(g, 3)
    h = MetricState(TwistedMatrixField.scalar(g, s)).h
    fs = TwistedMatrixField.scalar(g, smooth_scalar(g, 4))
    ref = partial_conn(fs, TwistedMatrixField.identity(g, 1)).values
    np.testing.assert_allclose(partial_conn(fs, h).values, ref, atol=1e-12)


def test_partial_conn_leibniz():
    errs = []
    ns = (16, 32, 64)
    for n in ns:
        g = TorusGeometry(0.2 + 1j, 1.0, n)
        fv = np.empty((n, n, 2, 2), complex)
        gv = np.empty((n, n, 2, 2), complex)
        for i in range(2):
            for j in range(2):
                fv[..., i, j] = smooth_scalar(g, 10 + 2 * i + j, band=2, complex_values=True)
                gv[..., i, j] = smooth_scalar(g, 20 + 2 * i + j, band=2, complex_values=True)
        f = TwistedMatrixField(g, fv)
        q = TwistedMatrixField(g, gv)
        h = random_state(g, seed=5, twist=np.zeros((2, 2), int), band=2, decay=4.0).h
        lhs = partial_conn(f @ q, h).values
        rhs = partial_conn(f, h).values @ q.values + f.values @ partial_conn(q, h).values
        errs.append(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)))
    assert errs[-1] < 1e-3
    assert abs(_order(errs, ns) + 4) < 0.5


def test_partial_conn_reports_singular_metric(unit_torus):
    n = unit_torus.grid_n
    v = np.broadcast_to(np.eye(2), (n, n, 2, 2)).copy()
    v[5, 6] = np.diag([1.0, 0.0])
    with pytest.raises(np.linalg.LinAlgError, match=r"\(5, 6\)"):
        partial_conn(TwistedMatrixField.identity(unit_torus, 2), TwistedMatrixField(unit_torus, v))


def test_lambda_contract_examples():
    g = TorusGeometry(1j, 3.0, 16)
    omega = TwistedMatrixField.constant(g, [[1j * g.c / 2]], form_type=(1, 1))
    np.testing.assert_allclose(lambda_contract(omega).values, 1.0)
    zero = TwistedMatrixField.constant(g, [[0.0]], form_type=(1, 1))
    assert np.all(lambda_contract(zero).values == 0)
    x, _ = g.mesh
    eta = np.exp(2j * np.pi * x)
    out = lambda_contract(TwistedMatrixField.scalar(g, eta, (1, 1))).values[..., 0, 0]
    np.testing.assert_allclose(out, -2j * eta / g.c)
    with pytest.raises(ValueError):
        lambda_contract(TwistedMatrixField.scalar(g, eta))


# --- Laplacian and Poisson -----------------------------------------------------------------


def test_laplacian_examples():
    g = TorusGeometry(1j, 1.0, 32)
    x, _ = g.mesh
    assert np.max(np.abs(laplacian(np.full((32, 32), 2.5), g))) < 1e-12
    f = np.cos(2 * np.pi * x)
    np.testing.assert_allclose(laplacian(f, g, spectral=True), -4 * np.pi**2 * f, atol=1e-10)
    errs = []
    for n in (16, 32, 64):
        gn = TorusGeometry(1j, 1.0, n)
        xn, _ = gn.mesh
        fn = np.cos(2 * np.pi * xn)
        errs.append(np.max(np.abs(laplacian(fn, gn) + 4 * np.pi**2 * fn)))
    assert errs[1] < 1e-2
    assert abs(_order(errs, (16, 32, 64)) + 4) < 0.5


def test_laplacian_matches_euclidean_on_square_unit_torus():
    g = TorusGeometry(1j, 1.0, 64)
    x, y = g.mesh
    f = np.sin(2 * np.pi * x) * np.cos(4 * np.pi * y)
    np.testing.assert_allclose(laplacian(f, g, spectral=True), -20 * np.pi**2 * f, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(-0.5, 0.5), st.floats(0.5, 2.0))
def test_laplacian_integrates_to_zero(seed, re_tau, c):
    g = TorusGeometry(complex(re_tau, 1.1), c, 16)
    f = np.random.default_rng(seed).standard_normal((16, 16))
    assert abs(integrate(laplacian(f, g), g)) < 1e-10 * np.abs(laplacian(f, g)).max()


def test_poisson_examples():
    g = TorusGeometry(1j, 1.0, 32)
    assert np.all(poisson_solve(np.zeros((32, 32)), g) == 0)
    x, _ = g.mesh
    f = poisson_solve(np.cos(2 * np.pi * x), g)
    # exact inverse of the difference operator, continuum value up to O(h^4)
    s1 = fd_symbol(32)[1]
    np.testing.assert_allclose(f, -np.cos(2 * np.pi * x) / s1**2, atol=1e-14)
    np.testing.assert_allclose(f, -np.cos(2 * np.pi * x) / (4 * np.pi**2), atol=2e-4 / (4 * np.pi**2))


@given(st.integers(0, 10_000), st.floats(-0.5, 0.5), st.floats(0.5, 3.0))
def test_poisson_round_trip(seed, re_tau, c):
    g = TorusGeometry(complex(re_tau, 0.9), c, 16)
    q = smooth_scalar(g, seed, band=7)
    q = q - q.mean()
    f = poisson_solve(q, g)
    assert abs(integrate(f, g)) < 1e-12 * g.volume * max(1.0, np.abs(f).max())
    assert np.max(np.abs(laplacian(f, g) - q)) <= 1e-10 * np.max(np.abs(q))


def test_poisson_rejects_nonzero_mean(unit_torus):
    with pytest.raises(ValueError, match="mean"):
        poisson_solve(np.ones((32, 32)), unit_torus)


# --- checkpoint format ------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = TorusGeometry(0.3 + 1.2j, 1.5, 8)
    f = random_state(g, seed=3, twist=twist_from_degrees((2, -1, 0))).S
    p = tmp_path / "f.heflow"
    save_field(p, f)
    back = load_field(p)
    assert back.geometry == g
    assert back.form_type == f.form_type
    np.testing.assert_array_equal(back.twist, f.twist)
    assert back.values.tobytes() == f.values.tobytes()


def test_checkpoint_header_layout(tmp_path):
    g = TorusGeometry(0.25 + 1.5j, 2.0, 8)
    f = TwistedMatrixField(g, np.zeros((8, 8, 2, 2)) + 1.5 - 0.5j, twist_from_degrees((1, -1)), (1, 1))
    p = tmp_path / "f.heflow"
    save_field(p, f)
    data = p.read_bytes()
    assert data[:8] == CHECKPOINT_MAGIC and data[:7] == b"HEFLOW1"
    assert struct.unpack_from("<qqqq", data, 8) == (8, 2, 1, 1)
    assert struct.unpack_from("<4q", data, 40) == (0, 2, -2, 0)
    assert struct.unpack_from("<ddd", data, 72) == (0.25, 1.5, 2.0)
    assert struct.unpack_from("<dd", data, 96) == (1.5, -0.5)
    assert len(data) == 96 + 16 * 8 * 8 * 4


def test_checkpoint_rejects_truncation_and_bad_magic(tmp_path):
    g = TorusGeometry(1j, 1.0, 8)
    p = tmp_path / "f.heflow"
    save_field(p, TwistedMatrixField.identity(g, 2))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_field(p)
    p.write_bytes(b"NOTHEFLW" + bytes(100))
    with pytest.raises(ValueError, match="HEFLOW1"):
        load_field(p)
