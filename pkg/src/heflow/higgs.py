"""Higgs bundles over the flat torus, Hermitian metrics and the Einstein deviation.

A bundle is a sum of line bundles L_{d_1} + ... + L_{d_r}, each carrying the
constant-curvature reference weight k_d = exp(-2 pi d Im(z)^2 / Im(tau)). The
holomorphic structure is dbar + a for a (0,1)-form a, and theta is a (1,0)-form.
Metrics are H = K0 h with K0 = diag(k_{d_i}); a :class:`MetricState` stores
S = log h.

Pointwise algebra runs in the K0-unitary ("hat") frame, where
A_hat = diag(sqrt k) A diag(sqrt k)^-1 and K0-adjoints become conjugate
transposes. Derivatives are always taken in the holomorphic frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import fiber
from .geometry import (
    TorusGeometry,
    TwistedMatrixField,
    _dz_values,
    _dzbar_values,
    integrate,
    theta_section,
    twist_from_degrees,
)

__all__ = [
    "HiggsBundle",
    "MetricState",
    "RelativeLog",
    "PhiEvaluation",
    "DegreeResult",
    "PRESETS",
    "preset",
    "bundle_from_constants",
    "h_norm2",
    "hat_weights",
    "evaluate",
    "curvature",
    "higgs_adjoint",
    "phi",
    "chern_weil_degree",
    "build_tensor",
    "build_whitney",
    "random_state",
]

NILPOTENT = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=np.complex128)
PRESETS = ("flat_rank2", "extension_O_O", "nilpotent_higgs", "split_unstable")


def hat_weights(geometry: TorusGeometry, twist) -> np.ndarray:
    """sqrt(k_i / k_j) = exp(-pi m_ij Im(tau) y^2) on the grid, shape (n, n, r, r)."""
    return geometry.hat_weights(twist)


@dataclass(frozen=True)
class HiggsBundle:
    """Higgs bundle data on a flat torus.

    ``a`` is the dzbar-coefficient of the deformation of dbar, ``theta`` the
    dz-coefficient of the Higgs field; both are endomorphism fields with the
    twist of the degree vector.
    """

    geometry: TorusGeometry
    degrees: tuple
    a: TwistedMatrixField
    theta: TwistedMatrixField
    name: str = "custom"
    holomorphy_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        tw = self.twist
        for label, f, ft in (("a", self.a, (0, 1)), ("theta", self.theta, (1, 0))):
            if f.geometry != self.geometry:
                raise ValueError(f"{label} lives on a different geometry")
            if f.form_type != ft:
                raise ValueError(f"{label} must be a {ft} field")
            if not np.array_equal(f.twist, tw):
                raise ValueError(f"{label} twist does not match degrees {self.degrees}")
        res = self.holomorphy_residual()
        scale = max(1.0, self.theta.sup_norm(), self.a.sup_norm())
        if res > self.holomorphy_tol * scale:
            raise ValueError(f"Higgs field is not holomorphic: |dbar_a theta| = {res:.3e}")

    @property
    def rank(self) -> int:
        return len(self.degrees)

    @cached_property
    def twist(self) -> np.ndarray:
        return twist_from_degrees(self.degrees)

    @property
    def degree(self) -> int:
        return sum(self.degrees)

    @property
    def slope(self) -> float:
        return self.degree / self.rank

    @property
    def lambda_const(self) -> float:
        return 2 * np.pi * self.slope / self.geometry.volume

    @property
    def weights(self) -> np.ndarray:
        return hat_weights(self.geometry, self.twist)

    def to_hat(self, values):
        return values * self.weights

    def from_hat(self, values):
        return values / self.weights

    @cached_property
    def a_hat(self):
        return self.to_hat(self.a.values)

    @cached_property
    def theta_hat(self):
        return self.to_hat(self.theta.values)

    def holomorphy_residual(self) -> float:
        """sup |dbar_a theta| (coefficient of dz ^ dzbar, Euclidean norm)."""
        T, A = self.theta_hat, self.a_hat
        res = -_dzbar_values(T, self.geometry, self.twist) + fiber.comm(T, A)
        return float(np.sqrt(np.max(fiber.frob2(res))))

    @cached_property
    def background_curvature_hat(self) -> np.ndarray:
        """dz ^ dzbar coefficient of F for (dbar + a, K0), in the hat frame.

        F = diag(pi d_i / Im tau) + d_K A + dA*/dzbar + A A* - A* A.
        """
        g = self.geometry
        r = self.rank
        A_adj_hat = fiber.dag(self.a_hat)
        dA = _dz_values(self.a_hat, g, self.twist)
        dAs = _dzbar_values(A_adj_hat, g, self.twist)
        flat = np.zeros((g.grid_n, g.grid_n, r, r), np.complex128)
        flat[..., np.arange(r), np.arange(r)] = np.pi * np.asarray(self.degrees) / g.tau.imag
        return (
            flat
            + dA
            + dAs
            + fiber.mm(self.a_hat, A_adj_hat)
            - fiber.mm(A_adj_hat, self.a_hat)
        )

    def reference_degree(self) -> float:
        """Chern-Weil degree of the reference metric (should equal sum d_i)."""
        tr = np.trace(self.background_curvature_hat, axis1=2, axis2=3)
        return float(np.real(integrate(2 * tr / self.geometry.c, self.geometry)) / (2 * np.pi))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "degrees": list(self.degrees),
            "a": _matrix_summary(self.a),
            "theta": _matrix_summary(self.theta),
        }


def _matrix_summary(f: TwistedMatrixField):
    v = f.values
    if np.allclose(v, v[:1, :1]):
        m = v[0, 0]
        return [[[float(x.real), float(x.imag)] for x in row] for row in m]
    return "field"


def preset(name: str, geometry: TorusGeometry, strength: float = 1.0, a=None, theta=None) -> HiggsBundle:
    """Named bundle configurations.

    ``strength`` scales the nilpotent constant of the extension class or Higgs
    field; explicit ``a`` / ``theta`` matrices override the preset constants.
    """
    zero = np.zeros((2, 2), np.complex128)
    if name == "flat_rank2":
        degrees, a0, t0 = (0, 0), zero, zero
    elif name == "extension_O_O":
        degrees, a0, t0 = (0, 0), strength * NILPOTENT, zero
    elif name == "nilpotent_higgs":
        degrees, a0, t0 = (0, 0), zero, strength * NILPOTENT
    elif name == "split_unstable":
        degrees, a0, t0 = (1, -1), zero, zero
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")
    a0 = a0 if a is None else np.asarray(a, np.complex128)
    t0 = t0 if theta is None else np.asarray(theta, np.complex128)
    tw = twist_from_degrees(degrees)
    return HiggsBundle(
        geometry,
        degrees,
        TwistedMatrixField.constant(geometry, a0, tw, (0, 1)),
        TwistedMatrixField.constant(geometry, t0, tw, (1, 0)),
        name=name,
    )


def bundle_from_constants(geometry, degrees, a, theta, name="custom") -> HiggsBundle:
    tw = twist_from_degrees(degrees)
    return HiggsBundle(
        geometry,
        tuple(degrees),
        TwistedMatrixField.constant(geometry, np.asarray(a, np.complex128), tw, (0, 1)),
        TwistedMatrixField.constant(geometry, np.asarray(theta, np.complex128), tw, (1, 0)),
        name=name,
    )


class MetricState:
    """Hermitian metric H = K0 h, stored through S = log h, at flow time t.

    S is K0-self-adjoint, so h is positive-definite by construction.
    """

    def __init__(self, S: TwistedMatrixField, t: float = 0.0):
        if S.form_type != (0, 0):
            raise ValueError("S must be a (0,0) field")
        w = hat_weights(S.geometry, S.twist)
        s_hat = S.values * w
        defect = np.max(np.abs(s_hat - fiber.dag(s_hat)))
        scale = max(1.0, float(np.max(np.abs(s_hat))))
        if defect > 1e-8 * scale:
            raise ValueError(f"S is not self-adjoint with respect to K0 (defect {defect:.3e})")
        self.S_hat = fiber.herm_part(s_hat)
        self.S_hat.flags.writeable = False
        self.S = S.with_values(self.S_hat / w)
        self.t = float(t)

    @classmethod
    def identity(cls, bundle_or_geometry, twist=None, t=0.0):
        if isinstance(bundle_or_geometry, HiggsBundle):
            geometry, twist = bundle_or_geometry.geometry, bundle_or_geometry.twist
        else:
            geometry = bundle_or_geometry
        r = np.asarray(twist).shape[0]
        n = geometry.grid_n
        return cls(TwistedMatrixField(geometry, np.zeros((n, n, r, r)), twist), t)

    @classmethod
    def from_hat(cls, geometry, twist, s_hat, t=0.0):
        w = hat_weights(geometry, twist)
        return cls(TwistedMatrixField(geometry, fiber.herm_part(s_hat) / w, twist), t)

    @classmethod
    def from_h(cls, h: TwistedMatrixField, t: float = 0.0, floor: float = 1e-14):
        """Principal logarithm of a K0-self-adjoint positive endomorphism field."""
        w = hat_weights(h.geometry, h.twist)
        hh = h.values * w
        defect = np.max(np.abs(hh - fiber.dag(hh)))
        if defect > 1e-10 * max(1.0, float(np.max(np.abs(hh)))):
            raise ValueError(f"h is not K0-self-adjoint (defect {defect:.3e})")
        lam, u = fiber.eigh(fiber.herm_part(hh))
        if np.min(lam) <= floor:
            idx = np.unravel_index(np.argmin(lam[..., 0]), lam.shape[:2])
            raise np.linalg.LinAlgError(
                f"h is not positive-definite at grid index {tuple(int(i) for i in idx)} "
                f"(eigenvalue {np.min(lam):.3e})"
            )
        return cls.from_hat(h.geometry, h.twist, fiber.from_eig(np.log(lam), u), t)

    def with_time(self, t) -> "MetricState":
        new = MetricState.__new__(MetricState)
        new.S_hat, new.S, new.t = self.S_hat, self.S, float(t)
        if "eig" in self.__dict__:
            new.__dict__["eig"] = self.__dict__["eig"]
        return new

    @property
    def geometry(self):
        return self.S.geometry

    @property
    def twist(self):
        return self.S.twist

    @property
    def rank(self):
        return self.S.rank

    @cached_property
    def eig(self):
        """(lam, U) with S_hat = U diag(lam) U^H."""
        return fiber.eigh(self.S_hat)

    @property
    def h_hat(self):
        lam, u = self.eig
        return fiber.from_eig(np.exp(lam), u)

    @property
    def h(self) -> TwistedMatrixField:
        w = hat_weights(self.geometry, self.twist)
        return self.S.with_values(self.h_hat / w)

    @property
    def h_inv_hat(self):
        lam, u = self.eig
        return fiber.from_eig(np.exp(-lam), u)

    def trace_S(self) -> np.ndarray:
        return np.real(np.trace(self.S_hat, axis1=2, axis2=3))

    def det_h(self) -> np.ndarray:
        return np.exp(self.trace_S())

    def min_eigenvalue(self) -> float:
        return float(np.exp(np.min(self.eig[0])))

    def __repr__(self):
        return f"MetricState(rank={self.rank}, t={self.t:g}, sup|S|={np.sqrt(np.max(fiber.frob2(self.S_hat))):.3g})"


class RelativeLog:
    """S = log(K^-1 H) for two metric states, in the K-unitary frame.

    With L = h_K_hat^{1/2} (Hermitian), an endomorphism X maps to the
    K-unitary frame as L X_hat L^-1, and S^K = log(L^-1 h_hat L^-1).
    ``sigma`` and ``V`` diagonalise S^K: S^K = V diag(sigma) V^H.
    """

    def __init__(self, K: MetricState, H: MetricState):
        self.K, self.H = K, H
        lamk, uk = K.eig
        self.L = fiber.from_eig(np.exp(lamk / 2), uk)
        self.Linv = fiber.from_eig(np.exp(-lamk / 2), uk)
        x = fiber.mm(fiber.mm(self.Linv, H.h_hat), self.Linv)
        mu, v = fiber.eigh(fiber.herm_part(x))
        if np.min(mu) <= 0:
            raise np.linalg.LinAlgError("relative metric is not positive-definite")
        self.sigma = np.log(mu)
        self.V = v

    def to_khat(self, x_hat):
        return fiber.mm(fiber.mm(self.L, x_hat), self.Linv)

    def from_khat(self, x_khat):
        return fiber.mm(fiber.mm(self.Linv, x_khat), self.L)

    @cached_property
    def S_khat(self):
        return fiber.from_eig(self.sigma, self.V)

    @cached_property
    def S_hat(self):
        return self.from_khat(self.S_khat)

    def S_field(self) -> TwistedMatrixField:
        w = hat_weights(self.K.geometry, self.K.twist)
        return self.K.S.with_values(self.S_hat / w)

    def fiber_norm(self) -> np.ndarray:
        """Pointwise K-Frobenius norm |S|_K."""
        return np.sqrt(np.sum(self.sigma**2, axis=-1))

    def trace(self) -> np.ndarray:
        return np.sum(self.sigma, axis=-1)

    def log_trace_sum(self) -> np.ndarray:
        """log(tr h + tr h^-1) for h = K^-1 H."""
        s = self.sigma
        return np.log(np.sum(np.exp(s) + np.exp(-s), axis=-1))


@dataclass
class PhiEvaluation:
    """Everything the flow needs from one evaluation of Phi(H)."""

    lam: np.ndarray  # eigenvalues of S_hat
    U: np.ndarray  # eigenframe of S_hat
    M: np.ndarray  # Phi in the H-unitary frame U e^{lam/2}: Hermitian
    phi_hat: np.ndarray
    curvature_hat: np.ndarray  # dz ^ dzbar coefficient of F_H
    higgs_bracket_hat: np.ndarray  # dz ^ dzbar coefficient of [theta, theta^*H]
    self_adjoint_defect: float = 0.0

    @property
    def norm2(self) -> np.ndarray:
        """Pointwise |Phi|_H^2."""
        return fiber.frob2(self.M)

    def trace(self) -> np.ndarray:
        return np.real(np.trace(self.M, axis1=-2, axis2=-1))


def _adjoint_hat(x_hat, lam, u):
    """H-adjoint h^-1 x^dagger h of a hat-frame endomorphism, in the hat frame."""
    p = fiber.to_frame(fiber.dag(x_hat), u)
    return fiber.from_frame(p * np.exp(fiber.diff_matrix(lam)), u)


def evaluate(bundle: HiggsBundle, state: MetricState) -> PhiEvaluation:
    """Evaluate the curvature, Higgs bracket and Phi at a metric state.

    h^-1 d_K h is obtained from d_K S through the derivative of the matrix
    exponential in the eigenframe of S, so tr(h^-1 d_K h) = d tr S exactly.
    """
    g = bundle.geometry
    if state.geometry != g or not np.array_equal(state.twist, bundle.twist):
        raise ValueError("metric state does not belong to this bundle")
    lam, u = state.eig
    dS_hat = _dz_values(state.S_hat, g, bundle.twist)
    diff = fiber.diff_matrix(lam)
    x_hat = fiber.from_frame(fiber.to_frame(dS_hat, u) * fiber.phi1(diff), u)
    A_hat, T_hat = bundle.a_hat, bundle.theta_hat
    a_adj = fiber.dag(A_hat)
    b_hat = x_hat - _adjoint_hat(A_hat, lam, u) + a_adj
    curv = -_dzbar_values(b_hat, g, bundle.twist) + fiber.comm(b_hat, A_hat) + bundle.background_curvature_hat
    bracket = fiber.comm(T_hat, _adjoint_hat(T_hat, lam, u))
    r = bundle.rank
    phi_hat = (2.0 / g.c) * (curv + bracket) - bundle.lambda_const * np.eye(r)
    p = fiber.to_frame(phi_hat, u)
    half = np.exp(-0.5 * diff)  # entry (i, j): e^{(lam_i - lam_j)/2}
    m = p * half
    defect = float(np.max(np.abs(m - fiber.dag(m)))) if r > 1 else 0.0
    m = fiber.herm_part(m)
    phi_hat = fiber.from_frame(m / half, u)
    return PhiEvaluation(lam, u, m, phi_hat, curv, bracket, defect)


def curvature(bundle: HiggsBundle, state: MetricState) -> TwistedMatrixField:
    """F_H = F_{K,a} + dbar_a(h^-1 d_{K,a} h), as a (1,1) field."""
    ev = evaluate(bundle, state)
    return TwistedMatrixField(bundle.geometry, bundle.from_hat(ev.curvature_hat), bundle.twist, (1, 1))


def higgs_adjoint(bundle: HiggsBundle, state: MetricState) -> TwistedMatrixField:
    """theta^*H = h^-1 theta^*K0 h as a (0,1) field."""
    lam, u = state.eig
    adj = _adjoint_hat(bundle.theta_hat, lam, u)
    return TwistedMatrixField(bundle.geometry, bundle.from_hat(adj), bundle.twist, (0, 1))


def phi(bundle: HiggsBundle, state: MetricState) -> TwistedMatrixField:
    """Phi(H, theta) = i Lambda(F_H + [theta, theta^*H]) - lambda Id.

    The returned field is H-self-adjoint: the discrete curvature is projected
    onto its H-self-adjoint part, which only removes an O(h^4) defect.
    """
    ev = evaluate(bundle, state)
    return TwistedMatrixField(bundle.geometry, bundle.from_hat(ev.phi_hat), bundle.twist)


def h_norm2(x_hat, lam, u) -> np.ndarray:
    """Pointwise |X|_H^2 for a hat-frame endomorphism and H = exp(S)."""
    p = fiber.to_frame(x_hat, u)
    return fiber.frob2(p * np.exp(-0.5 * fiber.diff_matrix(lam)))


@dataclass
class DegreeResult:
    """Chern-Weil degree of a projection field, with its ingredients (all / 2 pi)."""

    degree: float
    curvature_term: float
    higgs_curvature_term: float
    dbar_term: float
    higgs_term: float
    idempotency_residual: float
    warnings: list = field(default_factory=list)

    def __float__(self):
        return self.degree


def chern_weil_degree(
    bundle: HiggsBundle,
    state: MetricState,
    projection: TwistedMatrixField | None = None,
    warn_tol: float = 1e-3,
    reject_tol: float = 0.1,
) -> DegreeResult:
    """Gauss-Codazzi degree (1/2pi) int tr(pi i Lambda F_{K,theta}) - |D''_theta pi|_K^2.

    ``state`` plays the role of the metric K. Without a projection the full
    degree of the bundle is returned. The Higgs contributions (the bracket
    inside F_{K,theta} and the [theta, pi] part of D''pi) are reported
    separately.
    """
    g = bundle.geometry
    ev = evaluate(bundle, state)
    r = bundle.rank
    lam, u = ev.lam, ev.U
    if projection is None:
        p_hat = np.broadcast_to(np.eye(r, dtype=np.complex128), ev.phi_hat.shape)
        p = p_hat
    else:
        if not np.array_equal(projection.twist, bundle.twist):
            raise ValueError("projection twist does not match the bundle")
        p = projection.values
        p_hat = bundle.to_hat(p)
    idem = float(np.sqrt(np.max(h_norm2(fiber.mm(p_hat, p_hat) - p_hat, lam, u))))
    notes = []
    if idem > reject_tol:
        raise ValueError(f"projection is not idempotent (residual {idem:.3e})")
    if idem > warn_tol:
        notes.append(f"idempotency residual {idem:.3e} above {warn_tol:g}")
    c = g.c
    curv_term = np.real(np.trace(fiber.mm(p_hat, (2 / c) * ev.curvature_hat), axis1=2, axis2=3))
    higgs_curv = np.real(np.trace(fiber.mm(p_hat, (2 / c) * ev.higgs_bracket_hat), axis1=2, axis2=3))
    if projection is None:
        dbar_sq = np.zeros_like(curv_term)
        higgs_sq = np.zeros_like(curv_term)
    else:
        dp_hat = _dzbar_values(p_hat, g, bundle.twist) + fiber.comm(bundle.a_hat, p_hat)
        tp_hat = fiber.comm(bundle.theta_hat, p_hat)
        dbar_sq = (2 / c) * h_norm2(dp_hat, lam, u)
        higgs_sq = (2 / c) * h_norm2(tp_hat, lam, u)
    twopi = 2 * np.pi
    terms = [integrate(x, g) / twopi for x in (curv_term, higgs_curv, dbar_sq, higgs_sq)]
    degree = terms[0] + terms[1] - terms[2] - terms[3]
    return DegreeResult(float(degree), *map(float, terms), idem, notes)


def _check_same_geometry(b1, b2):
    if b1.geometry != b2.geometry:
        raise ValueError("bundles live on different base geometries")


def build_tensor(b1: HiggsBundle, b2: HiggsBundle) -> HiggsBundle:
    """Tensor product with theta = theta_1 x Id + Id x theta_2 (Kronecker order)."""
    _check_same_geometry(b1, b2)
    g = b1.geometry
    degrees = tuple(d1 + d2 for d1 in b1.degrees for d2 in b2.degrees)
    i1, i2 = np.eye(b1.rank), np.eye(b2.rank)

    def ksum(x, y):
        return np.einsum("...ij,kl->...ikjl", x, i2).reshape(x.shape[:2] + (len(degrees),) * 2) + np.einsum(
            "ij,...kl->...ikjl", i1, y
        ).reshape(x.shape[:2] + (len(degrees),) * 2)

    tw = twist_from_degrees(degrees)
    a = TwistedMatrixField(g, ksum(b1.a.values, b2.a.values), tw, (0, 1))
    th = TwistedMatrixField(g, ksum(b1.theta.values, b2.theta.values), tw, (1, 0))
    return HiggsBundle(g, degrees, a, th, name=f"({b1.name})x({b2.name})")


def build_whitney(b1: HiggsBundle, b2: HiggsBundle) -> HiggsBundle:
    """Direct sum with block-diagonal deformation and Higgs field."""
    _check_same_geometry(b1, b2)
    g = b1.geometry
    r1, r2 = b1.rank, b2.rank
    degrees = b1.degrees + b2.degrees
    n = g.grid_n

    def block(x, y):
        out = np.zeros((n, n, r1 + r2, r1 + r2), np.complex128)
        out[..., :r1, :r1] = x
        out[..., r1:, r1:] = y
        return out

    tw = twist_from_degrees(degrees)
    a = TwistedMatrixField(g, block(b1.a.values, b2.a.values), tw, (0, 1))
    th = TwistedMatrixField(g, block(b1.theta.values, b2.theta.values), tw, (1, 0))
    if b1.slope != b2.slope:
        warnings.warn("Whitney sum of bundles with different slopes is not semistable", stacklevel=2)
    return HiggsBundle(g, degrees, a, th, name=f"({b1.name})+({b2.name})")


def _band_limited(rng, n, band, decay, complex_values):
    """Random field with modes |k|, |l| <= band; the draw does not depend on n."""
    band = min(band, n // 2 - 1)
    k = np.arange(-band, band + 1)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    env = np.where((kx == 0) & (ky == 0), 0.0, (1.0 + kx**2 + ky**2) ** (-decay / 2))
    coef = np.zeros((n, n), np.complex128)
    coef[kx % n, ky % n] = (rng.standard_normal(kx.shape) + 1j * rng.standard_normal(kx.shape)) * env
    f = np.fft.ifft2(coef) * n * n
    return f if complex_values else f.real


def random_state(
    bundle_or_geometry,
    seed: int = 0,
    amplitude: float = 0.5,
    band: int | None = None,
    decay: float = 3.0,
    twist=None,
    traceless: bool = False,
) -> MetricState:
    """Band-limited random K0-self-adjoint S, scaled to sup |S| = amplitude.

    Fourier modes with |k|, |l| <= band (default grid_n / 4) get Gaussian
    coefficients with envelope (1 + |k|^2)^(-decay/2). Off-diagonal entries of
    nonzero twist m > 0 are combinations of random periodic functions with the
    m theta sections of degree m; the opposite entries follow by self-adjointness.
    """
    if isinstance(bundle_or_geometry, HiggsBundle):
        g, twist = bundle_or_geometry.geometry, bundle_or_geometry.twist
    else:
        g = bundle_or_geometry
        twist = np.zeros((1, 1), np.int64) if twist is None else np.asarray(twist)
    n = g.grid_n
    r = twist.shape[0]
    band = n // 4 if band is None else band
    rng = np.random.default_rng(seed)
    w = hat_weights(g, twist)
    s_hat = np.zeros((n, n, r, r), np.complex128)
    for i in range(r):
        s_hat[..., i, i] = _band_limited(rng, n, band, decay, False)
        for j in range(i + 1, r):
            m = int(twist[i, j])
            if m == 0:
                entry = _band_limited(rng, n, band, decay, True)
                s_hat[..., i, j] = entry
            else:
                lo, hi = (i, j) if m > 0 else (j, i)
                mm = abs(m)
                sec = sum(_band_limited(rng, n, band, decay, True) * theta_section(g, mm, q) for q in range(mm))
                s_hat[..., lo, hi] = sec * w[..., lo, hi]
                entry = s_hat[..., lo, hi]
                s_hat[..., i, j] = entry if lo == i else np.conj(entry)
            s_hat[..., j, i] = np.conj(s_hat[..., i, j])
    if traceless:
        tr = np.trace(s_hat, axis1=2, axis2=3).real / r
        s_hat = s_hat - tr[..., None, None] * np.eye(r)
    norm = np.sqrt(np.max(fiber.frob2(s_hat)))
    if norm > 0:
        s_hat *= amplitude / norm
    return MetricState.from_hat(g, twist, s_hat)
