"""Spectral calculus on self-adjoint endomorphism fields and the Donaldson functional.

Two evaluations of mu(K, H) are provided: the closed spectral form built from
S = log(K^-1 H), and the path integral of tr(Phi(H_s) H_s^-1 dH_s/ds) along
a geodesic or linear path. They are independent enough to cross-check each
other.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import fiber
from .geometry import TwistedMatrixField, _dzbar_values, integrate
from .higgs import HiggsBundle, MetricState, RelativeLog, evaluate, hat_weights

__all__ = [
    "SpectralDecomposition",
    "rho_apply",
    "psi_apply",
    "donaldson_closed",
    "donaldson_path",
    "donaldson_pair",
    "energy_derivative_check",
    "QuadratureError",
]


class QuadratureError(RuntimeError):
    pass


@dataclass
class SpectralDecomposition:
    """Pointwise eigen-decomposition of a K0-self-adjoint field.

    ``frames`` are unitary in the K0-unitary frame, so columns are K0-orthonormal
    eigenvectors once mapped back by the reference weights.
    """

    field: TwistedMatrixField
    eigenvalues: np.ndarray  # (n, n, r), ascending
    frames: np.ndarray  # (n, n, r, r)

    @classmethod
    def of(cls, eta: TwistedMatrixField, tol: float = 1e-10) -> "SpectralDecomposition":
        w = hat_weights(eta.geometry, eta.twist)
        e_hat = eta.values * w
        scale = max(float(np.max(np.abs(e_hat))), 1e-300)
        defect = float(np.max(np.abs(e_hat - fiber.dag(e_hat))))
        if defect > tol * scale:
            raise ValueError(f"field is not self-adjoint with respect to K0 (defect {defect:.3e})")
        lam, u = fiber.eigh(fiber.herm_part(e_hat))
        return cls(eta, lam, u)

    @property
    def weights(self):
        return hat_weights(self.field.geometry, self.field.twist)

    def rebuild(self, lam=None) -> TwistedMatrixField:
        lam = self.eigenvalues if lam is None else lam
        return self.field.with_values(fiber.from_eig(lam, self.frames) / self.weights)

    def reconstruction_error(self) -> float:
        return float(np.max(np.abs(self.rebuild().values - self.field.values)))


def rho_apply(eta, rho) -> TwistedMatrixField:
    """Apply a real function to the eigenvalues of a K0-self-adjoint field."""
    dec = eta if isinstance(eta, SpectralDecomposition) else SpectralDecomposition.of(eta)
    return dec.rebuild(np.asarray(rho(dec.eigenvalues), dtype=float))


def psi_apply(eta, p: TwistedMatrixField, psi) -> TwistedMatrixField:
    """Scale the eigenframe components p_ij of p by psi(lambda_i, lambda_j).

    Component (i, j) is the coefficient of the map e_j -> e_i, so the row
    index pairs with the first argument.
    """
    dec = eta if isinstance(eta, SpectralDecomposition) else SpectralDecomposition.of(eta)
    if not np.array_equal(p.twist, dec.field.twist):
        raise ValueError("p and eta carry different twists")
    w = dec.weights
    lam = dec.eigenvalues
    comp = fiber.to_frame(p.values * w, dec.frames)
    scale = np.asarray(psi(lam[..., :, None], lam[..., None, :]), dtype=float)
    return p.with_values(fiber.from_frame(comp * scale, dec.frames) / w)


def _dbar_a_hat(bundle: HiggsBundle, s_hat: np.ndarray) -> np.ndarray:
    """dzbar coefficient of dbar_a S in the hat frame."""
    return _dzbar_values(s_hat, bundle.geometry, bundle.twist) + fiber.comm(bundle.a_hat, s_hat)


@dataclass
class ClosedForm:
    value: float
    curvature_term: float
    gradient_term: float


def donaldson_closed(bundle: HiggsBundle, K: MetricState, H: MetricState, detail: bool = False):
    """Closed spectral form of mu(K, H).

    mu = int tr(S (i Lambda F_{K,theta} - lambda)) + <Psi[S](D'' S), D'' S>_K,
    with D'' S = dbar_a S + [theta, S] and |dz|^2 = |dzbar|^2 = 2/c. In the
    K-orthonormal eigenframe of S the entry (row, col) is weighted by
    Psi(sigma_col, sigma_row).
    """
    g = bundle.geometry
    rel = RelativeLog(K, H)
    ev = evaluate(bundle, K)
    s_hat = rel.S_hat
    lin = np.real(np.trace(fiber.mm(s_hat, ev.phi_hat), axis1=2, axis2=3))
    dbar = rel.to_khat(_dbar_a_hat(bundle, s_hat))
    brk = rel.to_khat(fiber.comm(bundle.theta_hat, s_hat))
    weight = fiber.psi(rel.sigma[..., None, :], rel.sigma[..., :, None])
    quad = np.zeros_like(lin)
    for x in (dbar, brk):
        comp = fiber.to_frame(x, rel.V)
        quad = quad + np.sum(weight * np.abs(comp) ** 2, axis=(-1, -2))
    quad *= 2.0 / g.c
    a, b = float(integrate(lin, g)), float(integrate(quad, g))
    if detail:
        return ClosedForm(a + b, a, b)
    return a + b


def _simpson(values, h):
    return h / 3.0 * (values[0] + values[-1] + 4 * np.sum(values[1:-1:2]) + 2 * np.sum(values[2:-1:2]))


def _path_integrand(bundle, K, rel, s, path):
    g = bundle.geometry
    if path == "geodesic":
        hs = fiber.mm(fiber.mm(rel.L, fiber.from_eig(np.exp(s * rel.sigma), rel.V)), rel.L)
        lam, u = fiber.eigh(fiber.herm_part(hs))
        tangent = rel.S_hat
    elif path == "linear":
        hk, hh = K.h_hat, rel.H.h_hat
        hs = (1 - s) * hk + s * hh
        lam, u = fiber.eigh(fiber.herm_part(hs))
        inv = fiber.from_eig(1.0 / lam, u)
        tangent = fiber.mm(inv, hh - hk)
    else:
        raise ValueError(f"unknown path {path!r}; use 'geodesic' or 'linear'")
    state = MetricState.from_hat(g, bundle.twist, fiber.from_eig(np.log(lam), u))
    ev = evaluate(bundle, state)
    return float(np.real(integrate(np.trace(fiber.mm(ev.phi_hat, tangent), axis1=2, axis2=3), g)))


def donaldson_path(
    bundle: HiggsBundle,
    K: MetricState,
    H: MetricState,
    path: str = "geodesic",
    nodes=(9, 17, 33),
    rtol: float = 1e-7,
    max_nodes: int = 257,
) -> float:
    """mu(K, H) as int_0^1 int tr(Phi(H_s) H_s^-1 dH_s/ds) ds.

    Composite Simpson on the node ladder, extended by doubling, with a
    Richardson correction. Raises :class:`QuadratureError` when successive
    extrapolated values still differ by more than ``rtol`` at ``max_nodes``.
    """
    rel = RelativeLog(K, H)
    cache = {}

    def f(s):
        if s not in cache:
            cache[s] = _path_integrand(bundle, K, rel, s, path)
        return cache[s]

    ladder = list(nodes)
    while ladder[-1] < max_nodes:
        ladder.append(2 * ladder[-1] - 1)
    prev_simpson = prev_rich = None
    for m in ladder:
        if m % 2 == 0:
            raise ValueError("Simpson's rule needs an odd node count")
        s = np.linspace(0.0, 1.0, m)
        val = _simpson(np.array([f(float(x)) for x in s]), 1.0 / (m - 1))
        rich = val if prev_simpson is None else val + (val - prev_simpson) / 15.0
        if prev_rich is not None:
            scale = max(abs(rich), 1e-12 * max(1.0, max(abs(v) for v in cache.values())))
            if abs(rich - prev_rich) <= rtol * scale or max(abs(v) for v in cache.values()) == 0.0:
                return float(rich)
        prev_simpson, prev_rich = val, rich
    raise QuadratureError(f"path quadrature not converged at {ladder[-1]} nodes (last value {prev_rich:.10g})")


def donaldson_pair(bundle, K, H) -> dict:
    """mu(K, H), mu(H, K) and their sum (reported, not asserted to vanish)."""
    a = donaldson_closed(bundle, K, H)
    b = donaldson_closed(bundle, H, K)
    return {"mu_KH": a, "mu_HK": b, "sum": a + b}


def energy_derivative_check(times, mu, phi_l2_sq, resolution: float = 1e6) -> np.ndarray:
    """Normalised residual |dmu/dt + 2 ||Phi||^2| / ||Phi||^2 at interior samples.

    The derivative is the three-point centred formula for possibly uneven
    spacing (second order). The normaliser is floored at the finite-difference
    resolution of mu, ``resolution * eps * |mu| / spacing``: below it the
    energy has stopped changing in floating point and the quotient only
    measures roundoff.
    """
    t = np.asarray(times, float)
    m = np.asarray(mu, float)
    p = np.asarray(phi_l2_sq, float)
    if t.size < 3:
        raise ValueError("need at least three samples")
    h0 = t[1:-1] - t[:-2]
    h1 = t[2:] - t[1:-1]
    # difference form: exact zero for constant mu on any spacing
    deriv = (h1 / (h0 * (h0 + h1))) * (m[1:-1] - m[:-2]) + (h0 / (h1 * (h0 + h1))) * (m[2:] - m[1:-1])
    res = np.abs(deriv + 2 * p[1:-1])
    mag = np.maximum(np.maximum(np.abs(m[:-2]), np.abs(m[1:-1])), np.abs(m[2:]))
    floor = resolution * np.finfo(float).eps * mag / np.minimum(h0, h1)
    norm = np.maximum(p[1:-1], floor)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return np.where(norm > 0, res / np.where(norm > 0, norm, 1.0), res)
