"""Post-processing of unstable runs: normalised log-metrics, eigenvalue clusters,
destabilising projections, the invariant nu, and the heat-kernel smoothing bound.

For a run whose log-metric S = log(K^-1 H) grows without bound, u = S / ||S||_L1
has asymptotically constant eigenvalues. Spectral projections of u onto the
lower clusters give candidate destabilising subbundles whose degrees enter nu;
nu < 0 certifies that the bundle is not semistable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fiber
from .geometry import TorusGeometry, TwistedMatrixField, _dzbar_values, integrate
from .higgs import HiggsBundle, MetricState, RelativeLog, chern_weil_degree, hat_weights

__all__ = [
    "StableRegimeError",
    "ClusteringError",
    "RampError",
    "MissingStateError",
    "NormalizedLog",
    "Clusters",
    "Projection",
    "NuResult",
    "DestabilizingReport",
    "normalized_log",
    "l1_growth",
    "cluster_eigenvalues",
    "build_projection",
    "nu_forms",
    "nu_invariant",
    "dP_identity_check",
    "psi_limit_check",
    "heat_kernel_constant",
    "smoothing_check",
    "destabilizing_report",
    "file_sha256",
    "REPORT_SCHEMA",
]

REPORT_SCHEMA = "heflow.destabilizing_report/1"
RESIDUAL_KEYS = ("idempotency", "self_adjointness", "holomorphy", "higgs_invariance")


class StableRegimeError(ValueError):
    """||S||_L1 is too small for u = S / ||S||_L1 to mean anything."""


class ClusteringError(ValueError):
    pass


class RampError(ValueError):
    pass


class MissingStateError(LookupError):
    pass


# --- normalised log -------------------------------------------------------------


@dataclass
class NormalizedLog:
    """u = S / ||S||_L1 in the K-unitary frame.

    ``eigenvalues`` holds the ascending eigenvalue fields of u (n, n, r) and
    ``rel`` the underlying relative logarithm, whose ``V`` diagonalises u.
    """

    rel: RelativeLog
    l1: float
    t: float
    eigenvalues: np.ndarray

    @property
    def geometry(self) -> TorusGeometry:
        return self.rel.K.geometry

    @property
    def u_khat(self) -> np.ndarray:
        return fiber.from_eig(self.eigenvalues, self.rel.V)

    def u_field(self) -> TwistedMatrixField:
        w = hat_weights(self.geometry, self.rel.K.twist)
        return self.rel.K.S.with_values(self.rel.from_khat(self.u_khat) / w)

    def norm_l1(self) -> float:
        return float(integrate(np.sqrt(np.sum(self.eigenvalues**2, axis=-1)), self.geometry))

    def trace_stats(self) -> dict:
        tr = np.sum(self.eigenvalues, axis=-1)
        return {
            "integral": float(integrate(tr, self.geometry)),
            "mean": float(tr.mean()),
            "min": float(tr.min()),
            "max": float(tr.max()),
        }

    def eigenvalue_variance(self) -> np.ndarray:
        """Spatial variance of each eigenvalue field over the squared mean of |u|.

        The quotient does not depend on the volume, so one threshold serves
        every torus.
        """
        scale = self.l1_scale**2
        return np.var(self.eigenvalues, axis=(0, 1)) / scale

    @property
    def l1_scale(self) -> float:
        return 1.0 / self.geometry.volume  # mean of |u| since ||u||_L1 = 1


def normalized_log(K: MetricState, H: MetricState, floor: float = 1e-8) -> NormalizedLog:
    """u = S / ||S||_L1 for S = log(K^-1 H), with the Frobenius fiber norm.

    Raises :class:`StableRegimeError` when ||S||_L1 <= floor * V.
    """
    rel = RelativeLog(K, H)
    g = K.geometry
    l1 = float(integrate(rel.fiber_norm(), g))
    if not l1 > floor * g.volume:
        raise StableRegimeError(
            f"flow has not left the stable regime: ||S||_L1 = {l1:.3e} at t = {H.t:g}"
        )
    return NormalizedLog(rel, l1, float(H.t), rel.sigma / l1)


def l1_growth(times, s_l1, min_ratio: float = 1.5) -> dict:
    """Compare ||S||_L1 at the final time T with its value near T/2.

    Unbounded (linear) growth gives a ratio near 2; a log-metric that stays
    bounded gives a ratio near 1, and clusters extracted from it are not
    meaningful.
    """
    t = np.asarray(times, float)
    s = np.asarray(s_l1, float)
    if t.size < 2 or t[-1] <= t[0]:
        return {"ratio": None, "reliable": False}
    half = t[0] + 0.5 * (t[-1] - t[0])
    mid = float(np.interp(half, t, s))
    ratio = float(s[-1] / mid) if mid > 0 else math.inf
    return {"ratio": ratio, "reliable": bool(ratio >= min_ratio)}


# --- clusters ---------------------------------------------------------------------


@dataclass
class Clusters:
    values: np.ndarray  # cluster constants, ascending
    members: list  # eigenvalue indices per cluster
    medians: np.ndarray
    spreads: np.ndarray  # max - min of the member eigenvalue fields
    reliable: bool = True
    notes: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def multiplicities(self) -> list:
        return [len(m) for m in self.members]


def cluster_eigenvalues(nl, threshold: float = 1e-2, growth: dict | None = None) -> Clusters:
    """Group the spatial medians of the sorted eigenvalue fields.

    Neighbouring medians join a cluster when their gap is below
    ``threshold`` times the largest |median|, so the threshold is scale-free.
    ``nl`` is a :class:`NormalizedLog` or an (n, n, r) eigenvalue array.
    Passing the output of :func:`l1_growth` as ``growth`` marks the clusters
    unreliable when ||S||_L1 did not keep growing.
    """
    lam = nl.eigenvalues if isinstance(nl, NormalizedLog) else np.asarray(nl, float)
    lam = np.sort(lam, axis=-1)
    med = np.median(lam.reshape(-1, lam.shape[-1]), axis=0)
    scale = float(np.max(np.abs(med)))
    if scale == 0:
        raise ClusteringError("all eigenvalues vanish")
    groups = [[0]]
    for i in range(1, med.size):
        if med[i] - med[i - 1] < threshold * scale:
            groups[-1].append(i)
        else:
            groups.append([i])
    if len(groups) < 2:
        raise ClusteringError(
            "a single eigenvalue cluster is inconsistent with tr u = 0 and ||u||_L1 = 1"
        )
    values = np.array([med[g].mean() for g in groups])
    spreads = np.array([lam[..., g].max() - lam[..., g].min() for g in groups])
    out = Clusters(values, groups, med, spreads)
    if growth is not None and not growth.get("reliable", False):
        out.reliable = False
        out.notes.append(f"||S||_L1 stays bounded (growth ratio {growth.get('ratio')}); clusters unreliable")
    return out


# --- projections ------------------------------------------------------------------


def _ramp(lo: float, hi: float, width: float):
    mid = 0.5 * (lo + hi)
    a, b = mid - 0.5 * width, mid + 0.5 * width

    def p(x):
        return np.clip((b - x) / (b - a), 0.0, 1.0)

    return p, (a, b)


@dataclass
class Projection:
    alpha: int
    field: TwistedMatrixField
    residuals: dict
    trace_mean: float
    rank: int
    degree: float
    degree_terms: dict


def build_projection(
    bundle: HiggsBundle, nl: NormalizedLog, clusters: Clusters, alpha: int, ramp: float = 0.1
) -> Projection:
    """pi_alpha = P_alpha(u): 1 on clusters 1..alpha, 0 above, linear ramp in between.

    The ramp has width ``ramp`` times the gap and sits at its centre; if any
    eigenvalue field enters the ramp the step is ill-posed and
    :class:`RampError` is raised. Residuals are sup-norms in the K metric;
    the two (0,1)-form residuals include the form norm sqrt(2/c).
    """
    if not 1 <= alpha < clusters.count:
        raise ValueError(f"alpha must lie in 1..{clusters.count - 1}")
    lo, hi = clusters.values[alpha - 1], clusters.values[alpha]
    gap = hi - lo
    if not gap > 0:
        raise RampError("clusters are not separated")
    p, (a, b) = _ramp(lo, hi, ramp * gap)
    lam = nl.eigenvalues
    inside = (lam > a) & (lam < b)
    if np.any(inside):
        raise RampError(
            f"gap too small to place ramp: {int(inside.sum())} eigenvalues fall in [{a:.4g}, {b:.4g}]"
        )
    rel = nl.rel
    g = bundle.geometry
    pk = fiber.from_eig(p(lam), rel.V)
    p_hat = rel.from_khat(pk)
    w = hat_weights(g, bundle.twist)
    proj = TwistedMatrixField(g, p_hat / w, bundle.twist)
    r = bundle.rank
    eye = np.eye(r)
    form = math.sqrt(2.0 / g.c)
    dp = _dzbar_values(p_hat, g, bundle.twist) + fiber.comm(bundle.a_hat, p_hat)
    tp = fiber.comm(bundle.theta_hat, p_hat)

    def ksup(x_hat):
        return float(np.sqrt(np.max(fiber.frob2(rel.to_khat(x_hat)))))

    residuals = {
        "idempotency": float(np.sqrt(np.max(fiber.frob2(fiber.mm(pk, pk) - pk)))),
        "self_adjointness": float(np.sqrt(np.max(fiber.frob2(pk - fiber.dag(pk))))),
        "holomorphy": form * ksup(fiber.mm(eye - p_hat, dp)),
        "higgs_invariance": form * ksup(fiber.mm(eye - p_hat, tp)),
    }
    tr = np.real(np.trace(pk, axis1=2, axis2=3))
    trace_mean = float(integrate(tr, g) / g.volume)
    deg = chern_weil_degree(bundle, rel.K, proj)
    terms = {
        "curvature": deg.curvature_term,
        "higgs_curvature": deg.higgs_curvature_term,
        "dbar": deg.dbar_term,
        "higgs": deg.higgs_term,
    }
    return Projection(alpha, proj, residuals, trace_mean, int(round(trace_mean)), deg.degree, terms)


# --- nu ---------------------------------------------------------------------------


@dataclass
class NuResult:
    nu: float
    nu_trace: float
    forms_agree: bool
    identity_residual: float
    trusted: bool
    reasons: list = field(default_factory=list)


def nu_forms(values, ranks, degrees, total_degree: float, total_rank: int):
    """Slope form and trace form of nu, and the trace-zero identity residual.

    ``values`` are the l cluster constants; ``ranks``/``degrees`` describe
    E_1 .. E_{l-1}. Returns (slope form, trace form, sum gaps rank - lambda_l r).
    """
    lam = np.asarray(values, float)
    gaps = np.diff(lam)
    ranks = np.asarray(ranks, float)
    degs = np.asarray(degrees, float)
    if not (gaps.size == ranks.size == degs.size):
        raise ValueError("need l - 1 ranks and degrees for l cluster values")
    slope = total_degree / total_rank
    nu = float(np.sum(gaps * ranks * (slope - degs / ranks)))
    nu_tr = float(lam[-1] * total_degree - np.sum(gaps * degs))
    ident = float(np.sum(gaps * ranks) - lam[-1] * total_rank)
    return nu, nu_tr, ident


def nu_invariant(report, bundle: HiggsBundle, threshold: float = 1e-3, agree_tol: float = 1e-6) -> NuResult:
    """nu = sum (lambda_{a+1} - lambda_a) rank(E_a) (mu(E) - mu(E_a)).

    The value is always returned; it is marked untrusted when a projection
    residual exceeds ``threshold``, a trace is further than 0.05 from its
    rounded rank, the clusters are unreliable, or the two forms disagree.
    """
    projs = report.projections
    nu, nu_tr, ident = nu_forms(
        report.clusters.values,
        [pr.rank for pr in projs],
        [pr.degree for pr in projs],
        bundle.degree,
        bundle.rank,
    )
    reasons = []
    for pr in projs:
        for k in RESIDUAL_KEYS:
            if pr.residuals[k] >= threshold:
                reasons.append(f"pi_{pr.alpha} {k} residual {pr.residuals[k]:.3e}")
        if abs(pr.trace_mean - pr.rank) > 0.05:
            reasons.append(f"pi_{pr.alpha} trace {pr.trace_mean:.4f} is not near an integer")
        if pr.rank < 1 or pr.rank >= bundle.rank:
            reasons.append(f"pi_{pr.alpha} has rank {pr.rank}")
    if not report.clusters.reliable:
        reasons.append("clusters flagged unreliable")
    agree = abs(nu - nu_tr) <= agree_tol * max(1.0, abs(nu))
    if not agree:
        reasons.append(f"slope and trace forms differ by {abs(nu - nu_tr):.3e}")
    return NuResult(nu, nu_tr, agree, ident, not reasons, reasons)


# --- identities behind the contradiction argument ------------------------------------


def _divided_difference(f, x, y):
    if x == y:
        raise ValueError("divided differences here need distinct points")
    return (f(x) - f(y)) / (x - y)


def dP_identity_check(values) -> dict:
    """Check sum_a (lambda_{a+1} - lambda_a) dP_a(x, y)^2 = 1/|x - y| on all pairs.

    P_a is the step 1 below lambda_a and 0 above lambda_{a+1}; dP_a is its
    divided difference. Returns the largest relative residual.
    """
    lam = np.sort(np.asarray(values, float))
    if lam.size < 2 or np.any(np.diff(lam) <= 0):
        raise ValueError("need at least two distinct values")
    steps = [_ramp(lam[a], lam[a + 1], 0.1 * (lam[a + 1] - lam[a]))[0] for a in range(lam.size - 1)]
    gaps = np.diff(lam)
    worst = 0.0
    table = []
    for k in range(lam.size):
        for m in range(lam.size):
            if k == m:
                continue
            x, y = lam[k], lam[m]
            lhs = sum(gap * _divided_difference(p, x, y) ** 2 for gap, p in zip(gaps, steps))
            rhs = 1.0 / abs(x - y)
            table.append((float(x), float(y), float(lhs), rhs))
            worst = max(worst, abs(lhs - rhs) / rhs)
    return {"residual": worst, "pairs": table}


def _log_psi_weight(u: float) -> float:
    """log((e^u - u - 1)/u^2) without overflow for large u."""
    if u > 30:
        return u + math.log1p(-(u + 1) * math.exp(-u)) - 2 * math.log(u)
    return math.log(float(fiber.psi_weight(u)))


def psi_limit_check(ls, lam_k: float, lam_l: float, tol: float = 1e-3) -> dict:
    """Follow l Psi(l lam_k, l lam_l) along the increasing sequence ``ls``.

    For lam_k > lam_l the limit is 1/(lam_k - lam_l) and the residual is the
    relative error at the last l. Otherwise the values must grow without
    bound: divergence is detected when the logarithms increase along the
    sequence and the last one exceeds log(1/tol).
    """
    ls = np.asarray(ls, float)
    if lam_k == lam_l:
        raise ValueError("need distinct values")
    logs = np.array([math.log(l) + _log_psi_weight(l * (lam_l - lam_k)) for l in ls])
    values = np.where(logs < 700, np.exp(np.minimum(logs, 700)), np.inf)
    if lam_k > lam_l:
        expected = 1.0 / (lam_k - lam_l)
        residual = abs(values[-1] - expected) / expected
        return {"expected": expected, "values": values.tolist(), "residual": float(residual),
                "diverged": False, "ok": bool(residual <= tol)}
    increasing = bool(np.all(np.diff(logs) > 0))
    diverged = increasing and logs[-1] > math.log(1.0 / tol)
    return {"expected": math.inf, "values": values.tolist(), "log_values": logs.tolist(),
            "residual": None, "diverged": diverged, "ok": diverged}


# --- heat kernel smoothing ------------------------------------------------------------


def heat_kernel_constant(geometry: TorusGeometry, t: float = 1.0, rel_cut: float = 1e-28, min_radius: int = 8) -> dict:
    """C = sup_x chi(x, x, t) = V^-1 sum_k exp(-kappa_k t) on the flat torus.

    kappa_k = 4 pi^2 |tau k - l|^2 / (c Im(tau)^2) are the Laplacian eigenvalues.
    The square of lattice modes grows from ``min_radius`` until the largest
    term on its boundary is below ``rel_cut`` times the sum.
    """
    tau, c = geometry.tau, geometry.c
    radius = min_radius
    while True:
        k = np.arange(-radius, radius + 1)
        kx, ky = np.meshgrid(k, k, indexing="ij")
        terms = np.exp(-4 * np.pi**2 * np.abs(tau * kx - ky) ** 2 / (c * tau.imag**2) * t)
        edge = np.maximum(np.abs(kx), np.abs(ky)) == radius
        total = float(terms.sum())
        if terms[edge].max() < rel_cut * total:
            break
        radius *= 2
    return {"value": total / geometry.volume, "radius": radius, "edge_term": float(terms[edge].max())}


def _records(trace):
    if hasattr(trace, "accepted"):
        return trace.accepted
    if isinstance(trace, (str, Path)):
        with open(trace) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        return [r for r in recs if r.get("kind") != "rejected"]
    return [r for r in trace if r.get("kind") != "rejected"]


def _record_at(records, t):
    for rec in records:
        if abs(rec["t"] - t) <= 1e-9 * max(1.0, abs(t)):
            return rec
    raise MissingStateError(f"no recorded state at t = {t:g}; add it to the snapshot times")


def smoothing_check(trace, t0: float, geometry: TorusGeometry, tol: float = 1e-6) -> dict:
    """sup|Phi(t0 + 1)|^2 <= C int |Phi(t0)|^2 with the lattice heat-kernel constant.

    Both times must appear exactly in the trace (snapshot records).
    """
    recs = _records(trace)
    r0, r1 = _record_at(recs, t0), _record_at(recs, t0 + 1.0)
    hk = heat_kernel_constant(geometry)
    lhs = r1["sup_phi"] ** 2
    rhs = hk["value"] * r0["phi_l2_sq"]
    slack = rhs - lhs
    scale = abs(lhs) + abs(rhs)
    return {"t0": t0, "lhs": lhs, "rhs": rhs, "slack": slack, "scale": scale,
            "constant": hk["value"], "ok": bool(slack >= -tol * scale)}


# --- report -----------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DestabilizingReport:
    t: float
    s_l1: float
    clusters: Clusters
    variance: np.ndarray
    trace_stats: dict
    projections: list
    nu: NuResult | None = None
    growth: dict | None = None

    @property
    def trace_identity_residual(self) -> float:
        return self.nu.identity_residual if self.nu else float("nan")

    def to_document(self, files: dict | None = None, bundle: HiggsBundle | None = None) -> dict:
        """JSON-ready report; ``files`` maps a role to a path that is referenced by sha256."""
        doc = {
            "schema": REPORT_SCHEMA,
            "provenance": {"t": self.t, "s_l1": self.s_l1, "growth": self.growth},
            "clusters": {
                "values": self.clusters.values.tolist(),
                "multiplicities": self.clusters.multiplicities,
                "spreads": self.clusters.spreads.tolist(),
                "reliable": self.clusters.reliable,
                "notes": self.clusters.notes,
            },
            "eigenvalue_variance": self.variance.tolist(),
            "trace_u": self.trace_stats,
            "projections": [
                {"alpha": p.alpha, "rank": p.rank, "trace": p.trace_mean, "degree": p.degree,
                 "degree_terms": p.degree_terms, "residuals": p.residuals}
                for p in self.projections
            ],
            "nu": None if self.nu is None else asdict(self.nu),
            "files": {},
        }
        if bundle is not None:
            doc["bundle"] = bundle.describe()
        for role, path in (files or {}).items():
            doc["files"][role] = {"path": Path(path).name, "sha256": file_sha256(path)}
        return doc


def destabilizing_report(
    bundle: HiggsBundle,
    K: MetricState,
    H: MetricState,
    threshold: float = 1e-2,
    growth: dict | None = None,
    floor: float = 1e-8,
    ramp: float = 0.1,
    residual_threshold: float = 1e-3,
) -> DestabilizingReport:
    """Run the whole extraction: u, clusters, every pi_alpha and nu."""
    nl = normalized_log(K, H, floor)
    cl = cluster_eigenvalues(nl, threshold, growth)
    projs = [build_projection(bundle, nl, cl, a, ramp) for a in range(1, cl.count)]
    rep = DestabilizingReport(nl.t, nl.l1, cl, nl.eigenvalue_variance(), nl.trace_stats(), projs, growth=growth)
    rep.nu = nu_invariant(rep, bundle, residual_threshold)
    return rep
