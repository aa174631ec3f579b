"""Reference solutions that share no derivative or stepping code with the flow.

- :func:`scalar_exact` evolves rank-1 untwisted data by the exact Fourier
  symbol of the torus Laplacian.
- :func:`matrix_ode` integrates the flow for spatially constant, untwisted
  data, where it reduces to an ODE for a single matrix h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import eigh as dense_eigh

__all__ = [
    "ScalarHeatOracle",
    "scalar_exact",
    "ConstantHiggsData",
    "matrix_ode",
    "constant_phi",
    "constant_functional",
]


def _exact_rates(tau: complex, c: float, n: int) -> np.ndarray:
    """kappa(k, l) = 4 pi^2 |tau k - l|^2 / (c Im(tau)^2) on the FFT grid."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    return 4 * np.pi**2 * np.abs(tau * kx - ky) ** 2 / (c * tau.imag**2)


@dataclass
class ScalarHeatOracle:
    """Fourier coefficients of a real scalar field and the torus it lives on."""

    coefficients: np.ndarray
    tau: complex
    c: float

    @classmethod
    def from_samples(cls, values, tau=1j, c=1.0):
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("scalar oracle needs an n x n real field")
        if np.iscomplexobj(values) and np.max(np.abs(values.imag)) > 1e-12 * max(1.0, np.max(np.abs(values))):
            raise ValueError("scalar oracle needs real data")
        coef = np.fft.fft2(np.real(values))
        return cls(coef, complex(tau), float(c))

    def at(self, t: float) -> np.ndarray:
        n = self.coefficients.shape[0]
        decay = np.exp(-_exact_rates(self.tau, self.c, n) * t)
        return np.fft.ifft2(self.coefficients * decay).real


def scalar_exact(phi0, t: float, tau=1j, c: float = 1.0) -> np.ndarray:
    """Solution at time t of d phi/dt = Delta phi with phi(0) = phi0.

    ``phi0`` is an (n, n) array or a rank-1 field object exposing ``values``,
    ``twist`` and ``geometry``.
    """
    if hasattr(phi0, "values"):
        if phi0.values.shape[-1] != 1 or np.any(phi0.twist):
            raise ValueError("scalar oracle applies to rank-1 untwisted data only")
        tau, c = phi0.geometry.tau, phi0.geometry.c
        phi0 = phi0.values[..., 0, 0]
    return ScalarHeatOracle.from_samples(phi0, tau, c).at(t)


@dataclass
class ConstantHiggsData:
    """Spatially constant deformation and Higgs field on an untwisted bundle.

    ``degree`` is the common degree of the line bundles; with all degrees
    equal, the reference curvature and the Einstein constant cancel.
    """

    a: np.ndarray
    theta: np.ndarray
    c: float
    volume: float
    degree: int = 0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex)
        self.theta = np.asarray(self.theta, dtype=complex)


def constant_phi(data: ConstantHiggsData, h: np.ndarray) -> np.ndarray:
    """Phi = (2/c)([a, a^*h] + [theta, theta^*h]) for constant h."""
    hinv = np.linalg.inv(h)
    out = np.zeros_like(h, dtype=complex)
    for x in (data.a, data.theta):
        adj = hinv @ x.conj().T @ h
        out += x @ adj - adj @ x
    return (2.0 / data.c) * out


def _rhs(data, r):
    def f(_t, y):
        h = y.view(complex).reshape(r, r)
        dh = -2.0 * h @ constant_phi(data, h)
        return np.ascontiguousarray(dh).ravel().view(float)

    return f


def matrix_ode(data: ConstantHiggsData, h0, t_eval, rtol: float = 1e-12, atol: float = 1e-14) -> np.ndarray:
    """Integrate dh/dt = -2 h Phi(h) with DOP853; returns h at each time in ``t_eval``."""
    h0 = np.asarray(h0, dtype=complex)
    r = h0.shape[0]
    if np.ndim(data.a) != 2 or np.ndim(data.theta) != 2:
        raise ValueError("matrix ODE oracle needs constant matrices")
    t_eval = np.atleast_1d(np.asarray(t_eval, float))
    y0 = np.ascontiguousarray(h0).ravel().view(float)
    sol = solve_ivp(
        _rhs(data, r), (0.0, float(t_eval.max())), y0, method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol
    )
    if not sol.success:
        raise RuntimeError(f"matrix ODE failed: {sol.message}")
    return np.stack([np.ascontiguousarray(sol.y[:, i]).view(complex).reshape(r, r) for i in range(len(t_eval))])


def _psi(x, y):
    u = y - x
    if abs(u) < 1e-2:
        return 0.5 + u / 6 + u**2 / 24 + u**3 / 120 + u**4 / 720 + u**5 / 5040
    return (np.expm1(u) - u) / u**2


def constant_functional(data: ConstantHiggsData, k: np.ndarray, h: np.ndarray) -> float:
    """Donaldson functional between constant metrics (h, k relative to the identity).

    mu = V [tr(S Phi(k)) + (2/c) sum_{rc} Psi(s_c, s_r)(|[a, S]_rc|^2 + |[theta, S]_rc|^2)]
    evaluated in a k-orthonormal eigenbasis of S = log(k^-1 h).
    """
    k = np.asarray(k, complex)
    h = np.asarray(h, complex)
    # generalised eigenproblem h v = s k v gives k-orthonormal eigenvectors
    svals, vecs = dense_eigh(h, k)
    logs = np.log(svals)
    S = vecs @ np.diag(logs) @ np.linalg.inv(vecs)
    val = np.real(np.trace(S @ constant_phi(data, k)))
    vinv = np.linalg.inv(vecs)
    quad = 0.0
    for x in (data.a, data.theta):
        comm = vinv @ (x @ S - S @ x) @ vecs
        # entries of comm in a k-orthonormal basis are the k-unitary components
        for rr in range(len(logs)):
            for cc in range(len(logs)):
                quad += _psi(logs[cc], logs[rr]) * abs(comm[rr, cc]) ** 2
    return float(data.volume * (val + (2.0 / data.c) * quad))
