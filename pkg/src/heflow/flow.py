"""Conformal normalisation, time stepping of the heat flow and its monitors.

The flow is dh/dt = -2 h Phi(H) for h = K0^-1 H. Steppers update the log
metric S so that h stays self-adjoint and positive by construction:

- ``exp_euler``: h_new = h exp(-2 dt Phi), written as a congruence in the
  eigenframe of S.
- ``exp_midpoint``: h_new = g h g^* with g = exp(-dt Phi_mid^*) and Phi_mid
  evaluated after an Euler half step (second order).
- ``log_rk4``: classical RK4 on S, using dS/dt = -2 dlog_S(h Phi) (fourth order).

All three change tr S by exactly -2 dt tr Phi at the stage metrics, so the
determinant is conserved whenever tr Phi vanishes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fiber
from .functional import donaldson_closed
from .geometry import _dzbar_values, integrate, laplacian, laplacian_symbol, poisson_solve, save_field
from .higgs import HiggsBundle, MetricState, PhiEvaluation, RelativeLog, evaluate, h_norm2

log = logging.getLogger(__name__)

SCHEMES = ("exp_euler", "exp_midpoint", "log_rk4")
SCHEME_ORDER = {"exp_euler": 1, "exp_midpoint": 2, "log_rk4": 4}

__all__ = [
    "SCHEMES",
    "FlowConfig",
    "FlowTrace",
    "FlowResult",
    "FlowAbort",
    "NormalizationError",
    "normalize_initial",
    "step",
    "run",
    "lemma4_residuals",
    "inequality_monitors",
    "log_metric_bounds",
    "matrix_inequality_check",
]


class FlowAbort(RuntimeError):
    """Raised when the step size underflows; carries the trace so far."""

    def __init__(self, message, trace=None, state=None):
        super().__init__(message)
        self.trace = trace
        self.state = state


class NormalizationError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    """Time-stepping and monitoring parameters.

    ``monitor_every`` and ``checkpoint_every`` count accepted steps
    (0 disables checkpoints). ``snapshot_times`` are times the stepper lands
    on exactly and records, e.g. for the smoothing check.
    """

    dt: float
    t_max: float
    scheme: str = "exp_midpoint"
    monitor_every: int = 10
    monotonicity_slack: float = 1e-8
    det_drift_tol: float = 1e-6
    trace_drift_tol: float = 1e-6
    inequality_tol: float = 1e-6
    checkpoint_every: int = 0
    adaptive: bool = True
    max_halvings: int = 10
    regrow_after: int = 20
    functional: bool = True
    lemma4: bool = True
    snapshot_times: tuple = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.monitor_every < 1:
            raise ValueError("monitor_every must be at least 1")
        self.snapshot_times = tuple(sorted(float(t) for t in self.snapshot_times))

    def check_stability(self, geometry) -> bool:
        bound = geometry.stability_dt()
        if self.dt > bound:
            warnings.warn(
                f"dt = {self.dt:.3g} exceeds the explicit stability bound 0.2 V / n^2 = {bound:.3g}",
                stacklevel=2,
            )
            return False
        return True

    def to_dict(self):
        d = asdict(self)
        d["snapshot_times"] = list(self.snapshot_times)
        return d


# --- normalisation ------------------------------------------------------------


def normalize_initial(bundle: HiggsBundle, H0: MetricState, rtol: float = 1e-8) -> MetricState:
    """Conformal change K = e^f H0 with Delta f = (2/r) tr Phi(H0).

    Afterwards tr Phi(K) vanishes identically. The sign of the Poisson source
    is checked rather than assumed: if the post-condition fails with +1 the
    opposite sign is tried, and failure with both raises.
    """
    g = bundle.geometry
    r = bundle.rank
    ev = evaluate(bundle, H0)
    tr = ev.trace()
    scale = float(np.sqrt(np.max(ev.norm2)))
    if scale == 0.0 or np.max(np.abs(tr)) <= rtol * scale:
        return H0.with_time(0.0)
    base = poisson_solve(tr - integrate(tr, g) / g.volume, g)
    eye = np.eye(r)
    for sign in (1.0, -1.0):
        f = sign * (2.0 / r) * base
        K = MetricState.from_hat(g, bundle.twist, H0.S_hat + f[..., None, None] * eye, t=0.0)
        resid = float(np.max(np.abs(evaluate(bundle, K).trace())))
        if resid <= rtol * scale:
            if sign < 0:
                log.warning("normalisation needed the negative Poisson sign")
            return K
    raise NormalizationError(f"sup |tr Phi(K)| = {resid:.3e} after normalisation with either sign")


# --- steppers -------------------------------------------------------------------


def _expm_herm(m, s):
    """exp(s m) for Hermitian m."""
    mu, v = fiber.eigh(m)
    return fiber.from_eig(np.exp(s * mu), v)


def _log_pd(n_frame, logdet):
    """Log of Hermitian positive-definite matrices, with the determinant pinned.

    For rank 2 the small eigenvalue is recovered from the known determinant,
    which keeps tr log exact even when the matrices are badly conditioned.
    """
    nu, w = fiber.eigh(fiber.herm_part(n_frame))
    if nu.shape[-1] == 2:
        hi = np.log(nu[..., 1])
        lo = logdet - hi
        lognu = np.stack([lo, hi], axis=-1)
        # the closed-form solver orders eigenvalues; the pinned pair keeps that order
    else:
        if np.min(nu) <= 0:
            raise np.linalg.LinAlgError("metric lost positivity")
        lognu = np.log(nu)
        lognu += ((logdet - lognu.sum(axis=-1)) / nu.shape[-1])[..., None]
    if not np.all(np.isfinite(lognu)):
        raise FloatingPointError("non-finite metric after step")
    return fiber.from_eig(lognu, w)


def _euler_hat(ev: PhiEvaluation, dt):
    lam, u = ev.lam, ev.U
    e = _expm_herm(ev.M, -2.0 * dt)
    half = np.exp(0.5 * lam)
    n_frame = half[..., :, None] * e * half[..., None, :]
    logdet = lam.sum(axis=-1) - 2.0 * dt * ev.trace()
    return fiber.from_frame(_log_pd(n_frame, logdet), u)


def _midpoint_hat(bundle, state: MetricState, ev: PhiEvaluation, dt):
    half_state = MetricState.from_hat(state.geometry, state.twist, _euler_hat(ev, 0.5 * dt))
    evh = evaluate(bundle, half_state)
    lh, uh = evh.lam, evh.U
    f = _expm_herm(evh.M, -dt)
    g_frame = np.exp(0.5 * lh)[..., :, None] * f * np.exp(-0.5 * lh)[..., None, :]
    h0 = fiber.to_frame(fiber.from_eig(np.exp(ev.lam), ev.U), uh)
    n_frame = fiber.mm(fiber.mm(g_frame, h0), fiber.dag(g_frame))
    logdet = ev.lam.sum(axis=-1) - 2.0 * dt * evh.trace()
    return fiber.from_frame(_log_pd(n_frame, logdet), uh)


def _sinhc_inv(x):
    """(x/2) / sinh(x/2), even and smooth."""
    x = np.asarray(x, float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        out = (0.5 * xs) / np.sinh(0.5 * xs)
    return np.where(small, 1.0 - x**2 / 24.0, out)


def log_velocity(ev: PhiEvaluation) -> np.ndarray:
    """dS/dt in the hat frame for the flow dh/dt = -2 h Phi."""
    return fiber.from_frame(-2.0 * ev.M * _sinhc_inv(fiber.diff_matrix(ev.lam)), ev.U)


def _rk4_hat(bundle, state, ev, dt):
    g, tw = state.geometry, state.twist
    s0 = state.S_hat
    k1 = log_velocity(ev)
    k2 = log_velocity(evaluate(bundle, MetricState.from_hat(g, tw, s0 + 0.5 * dt * k1)))
    k3 = log_velocity(evaluate(bundle, MetricState.from_hat(g, tw, s0 + 0.5 * dt * k2)))
    k4 = log_velocity(evaluate(bundle, MetricState.from_hat(g, tw, s0 + dt * k3)))
    return s0 + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _advance(bundle, state, ev, dt, scheme):
    if scheme == "exp_euler":
        s_new = _euler_hat(ev, dt)
    elif scheme == "exp_midpoint":
        s_new = _midpoint_hat(bundle, state, ev, dt)
    elif scheme == "log_rk4":
        s_new = _rk4_hat(bundle, state, ev, dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.all(np.isfinite(s_new)):
        raise FloatingPointError("non-finite log metric after step")
    return MetricState.from_hat(state.geometry, state.twist, s_new, t=state.t + dt)


def step(bundle: HiggsBundle, state: MetricState, dt: float, scheme: str = "exp_midpoint") -> MetricState:
    """Advance the metric by one step of the heat flow."""
    ev = evaluate(bundle, state)
    if not np.all(np.isfinite(ev.M)):
        raise FloatingPointError("non-finite Phi")
    return _advance(bundle, state, ev, dt, scheme)


# --- monitors -------------------------------------------------------------------


def log_metric_bounds(sigma: np.ndarray):
    """Both sides of log((tr h + tr h^-1)/2r) <= |S| <= sqrt(r) log(tr h + tr h^-1).

    ``sigma`` holds eigenvalues of S along the last axis. Returns
    (lower, |S|, upper).
    """
    sigma = np.asarray(sigma, float)
    r = sigma.shape[-1]
    tsum = np.sum(np.exp(sigma) + np.exp(-sigma), axis=-1)
    return np.log(tsum / (2 * r)), np.sqrt(np.sum(sigma**2, axis=-1)), np.sqrt(r) * np.log(tsum)


def matrix_inequality_check(n_samples: int = 10_000, rank: int = 3, seed: int = 0, scale: float = 3.0) -> dict:
    """Check the log-metric sandwich on random Hermitian matrices by exact eigenvalues."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_samples, rank, rank)) + 1j * rng.standard_normal((n_samples, rank, rank))
    mags = scale * rng.uniform(0.0, 1.0, n_samples)[:, None, None]
    herm = fiber.herm_part(a) * mags
    sigma = np.linalg.eigvalsh(herm)
    lower, mid, upper = log_metric_bounds(sigma)
    low_slack = mid - lower
    up_slack = upper - mid
    return {
        "n_samples": n_samples,
        "rank": rank,
        "min_lower_slack": float(low_slack.min()),
        "min_upper_slack": float(up_slack.min()),
        "passed": bool(low_slack.min() >= -1e-12 and up_slack.min() >= -1e-12),
    }


@dataclass
class Lemma4Residuals:
    r1: float
    r2: float
    r1_abs: float
    r2_abs: float


def _d2_norm2(bundle, ev: PhiEvaluation):
    """Pointwise |D''_theta Phi|_H^2 = (2/c)(|dbar_a Phi|_H^2 + |[theta, Phi]|_H^2)."""
    g = bundle.geometry
    ph = ev.phi_hat
    d = _dzbar_values(ph, g, bundle.twist) + fiber.comm(bundle.a_hat, ph)
    t = fiber.comm(bundle.theta_hat, ph)
    return (2.0 / g.c) * (h_norm2(d, ev.lam, ev.U) + h_norm2(t, ev.lam, ev.U))


def lemma4_residuals(bundle: HiggsBundle, state0: MetricState, state1: MetricState, ev0=None, ev1=None):
    """Residuals of the evolution identities for tr Phi and |Phi|_H^2.

    r1 = sup |(d/dt - Delta) tr Phi| and r2 = sup |(d/dt - Delta)|Phi|^2 + 4|D''Phi|^2|,
    with the time derivative from the two states and the other terms averaged
    between them. Delta is the exact Fourier Laplacian, so the residuals
    measure the discretisation error of the flow. Relative values divide by
    the largest term of each identity, floored by the slowest diffusion rate
    times sup|Phi| (resp. sup|Phi|^2) so that identically vanishing terms
    do not turn roundoff into O(1) residuals.
    """
    g = bundle.geometry
    dt = state1.t - state0.t
    if not dt > 0:
        raise ValueError("states must be in increasing time order")
    ev0 = ev0 or evaluate(bundle, state0)
    ev1 = ev1 or evaluate(bundle, state1)
    tr0, tr1 = ev0.trace(), ev1.trace()
    n0, n1 = ev0.norm2, ev1.norm2
    dtr = (tr1 - tr0) / dt
    ltr = 0.5 * (laplacian(tr0, g, spectral=True) + laplacian(tr1, g, spectral=True))
    dn = (n1 - n0) / dt
    ln = 0.5 * (laplacian(n0, g, spectral=True) + laplacian(n1, g, spectral=True))
    grad = 2.0 * (_d2_norm2(bundle, ev0) + _d2_norm2(bundle, ev1))
    r1 = float(np.max(np.abs(dtr - ltr)))
    r2 = float(np.max(np.abs(dn - ln + grad)))
    # floors: the slowest diffusion rate times the current size of Phi
    kappa = float(np.min(-laplacian_symbol(g, spectral=True).ravel()[1:]))
    sup_phi = float(np.sqrt(max(n0.max(), n1.max())))
    dphi = float(np.sqrt(np.max(fiber.frob2(ev1.phi_hat - ev0.phi_hat)))) / dt
    s1 = max(float(np.max(np.abs(dtr))), float(np.max(np.abs(ltr))), dphi, kappa * sup_phi)
    s2 = max(float(np.max(np.abs(dn))), float(np.max(np.abs(ln))), float(np.max(grad)), kappa * sup_phi**2)
    return Lemma4Residuals(r1 / s1 if s1 > 0 else r1, r2 / s2 if s2 > 0 else r2, r1, r2)


def inequality_monitors(rec: dict, volume: float, rank: int) -> dict:
    """Slacks (right side minus left side) of the functional and L1 inequalities.

    Needs ``mu``, ``s_l1``, ``s_linf``, ``phi_l2``, ``phi_k_l1`` in ``rec``, and
    optionally the log-trace rate fields. Constants that the theory leaves
    unspecified are replaced by their explicit values for this problem:
    the lower bound uses C = ||Phi(K)||_L1.
    """
    out = {}
    mu = rec.get("mu")
    if mu is not None:
        out["lower_bound_slack"] = mu + rec["phi_k_l1"] * rec["s_linf"]
        lhs = (rec["s_l1"] / math.sqrt(rank) - volume * math.log(2 * rank)) * rec["phi_l2"]
        rhs = -math.sqrt(volume) * mu
        out["l1_energy_slack"] = rhs - lhs
        out["l1_energy_scale"] = abs(lhs) + abs(rhs)
    out["sup_l1_ratio"] = rec["s_linf"] * volume / rec["s_l1"] if rec["s_l1"] > 0 else None
    if rec.get("log_trace_rate") is not None:
        out["log_trace_rate_slack"] = 2.0 * rec["sup_phi_prev"] - rec["log_trace_rate"]
        out["log_trace_rate_ratio"] = (
            rec["log_trace_rate"] / rec["sup_phi_prev"] if rec["sup_phi_prev"] > 0 else None
        )
    return out


# --- traces ---------------------------------------------------------------------

TRACE_FIELDS = {
    "kind": "'monitor', 'snapshot', 'final' or 'rejected'",
    "step": "accepted steps so far",
    "t": "flow time",
    "dt": "step size in use",
    "sup_phi": "sup_x |Phi|_H (H-Frobenius)",
    "phi_l2": "||Phi||_L2",
    "phi_l2_sq": "||Phi||_L2^2",
    "phi_l1": "||Phi||_L1",
    "sup_tr_phi": "sup_x |tr Phi|",
    "det_drift": "sup_x |det(K^-1 H) - 1|",
    "tr_s_integral": "int tr S",
    "mu": "Donaldson functional mu(K, H(t)), closed form",
    "s_l1": "||S||_L1, K-Frobenius fiber norm",
    "s_linf": "||S||_Linf",
    "min_eig": "smallest eigenvalue of K^-1 H",
    "log_trace_min": "min_x log(tr h + tr h^-1)",
    "log_trace_max": "max_x log(tr h + tr h^-1)",
    "log_trace_mean": "mean_x log(tr h + tr h^-1)",
    "log_trace_rate": "sup_x of the time difference quotient of log(tr h + tr h^-1) over the last step",
    "log_trace_rate_pointwise_slack": "min_x (2|Phi|_H - rate), recorded only",
    "lower_bound_slack": "mu + ||Phi(K)||_L1 ||S||_Linf",
    "sup_l1_ratio": "V ||S||_Linf / ||S||_L1",
    "log_trace_rate_slack": "2 sup|Phi| - log_trace_rate",
    "log_trace_rate_ratio": "log_trace_rate / sup|Phi|",
    "l1_energy_slack": "-sqrt(V) mu - (r^-1/2 ||S||_L1 - V log 2r) ||Phi||_L2",
    "lemma4_r1": "relative residual of the tr Phi evolution identity",
    "lemma4_r2": "relative residual of the |Phi|^2 evolution identity",
    "flags": "monitor violations",
}


class FlowTrace:
    """Append-only list of monitor records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "w") if self.path else None

    def append(self, rec: dict):
        if self.records and rec["kind"] != "rejected":
            last = [r for r in self.records if r["kind"] != "rejected"]
            if last and rec["t"] <= last[-1]["t"]:
                raise ValueError("trace times must increase strictly")
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"non-finite monitor {k} at t={rec.get('t')}")
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    @property
    def accepted(self):
        return [r for r in self.records if r["kind"] != "rejected"]

    def column(self, name):
        return np.array([r.get(name, np.nan) if r.get(name) is not None else np.nan for r in self.accepted])

    @property
    def times(self):
        return self.column("t")

    def flags(self):
        return [(r["t"], f) for r in self.accepted for f in r.get("flags", [])]

    @classmethod
    def load(cls, path):
        tr = cls()
        with open(path) as fh:
            tr.records = [json.loads(line) for line in fh if line.strip()]
        return tr

    def __len__(self):
        return len(self.accepted)


@dataclass
class FlowResult:
    trace: FlowTrace
    state: MetricState
    K: MetricState
    rejected: int = 0
    checkpoints: list = field(default_factory=list)
    states: dict = field(default_factory=dict)


class _Monitor:
    def __init__(self, bundle, K, config):
        self.bundle, self.K, self.config = bundle, K, config
        g = bundle.geometry
        self.g = g
        evk = evaluate(bundle, K)
        self.phi_k_l1 = float(integrate(np.sqrt(evk.norm2), g))
        self.prev_logtrace = None

    def logtrace(self, rel):
        return rel.log_trace_sum()

    def record(self, kind, state, ev, dt, nstep, prev=None):
        g, cfg = self.g, self.config
        norm2 = ev.norm2
        norm = np.sqrt(norm2)
        rel = RelativeLog(self.K, state)
        snorm = rel.fiber_norm()
        trs = rel.trace()
        lt = self.logtrace(rel)
        rec = {
            "kind": kind,
            "step": int(nstep),
            "t": float(state.t),
            "dt": float(dt),
            "sup_phi": float(norm.max()),
            "phi_l2_sq": float(integrate(norm2, g)),
            "phi_l1": float(integrate(norm, g)),
            "sup_tr_phi": float(np.max(np.abs(ev.trace()))),
            "det_drift": float(np.max(np.abs(np.expm1(trs)))),
            "tr_s_integral": float(integrate(trs, g)),
            "s_l1": float(integrate(snorm, g)),
            "s_linf": float(snorm.max()),
            "min_eig": float(np.exp(rel.sigma.min())),
            "log_trace_min": float(lt.min()),
            "log_trace_max": float(lt.max()),
            "log_trace_mean": float(lt.mean()),
            "phi_k_l1": self.phi_k_l1,
            "mu": float(donaldson_closed(self.bundle, self.K, state)) if cfg.functional else None,
            "log_trace_rate": None,
            "log_trace_rate_pointwise_slack": None,
            "lemma4_r1": None,
            "lemma4_r2": None,
        }
        rec["phi_l2"] = math.sqrt(rec["phi_l2_sq"])
        flags = []
        if prev is not None:
            pstate, pev = prev
            step_dt = state.t - pstate.t
            lt0 = RelativeLog(self.K, pstate).log_trace_sum()
            rate = (lt - lt0) / step_dt
            rec["log_trace_rate"] = float(rate.max())
            rec["sup_phi_prev"] = float(np.sqrt(pev.norm2.max()))
            rec["log_trace_rate_pointwise_slack"] = float(np.min(2 * np.sqrt(pev.norm2) - rate))
            if cfg.lemma4:
                res = lemma4_residuals(self.bundle, pstate, state, pev, ev)
                rec["lemma4_r1"], rec["lemma4_r2"] = res.r1, res.r2
        rec.update(inequality_monitors(rec, g.volume, self.bundle.rank))
        tol = cfg.inequality_tol
        if rec["det_drift"] > cfg.det_drift_tol:
            flags.append("det_drift")
        if abs(rec["tr_s_integral"]) > cfg.trace_drift_tol * g.volume:
            flags.append("trace_drift")
        if rec.get("lower_bound_slack") is not None and rec["lower_bound_slack"] < -tol * (1 + abs(rec["mu"])):
            flags.append("lower_bound")
        if rec.get("l1_energy_slack") is not None and rec["l1_energy_slack"] < -tol * max(1.0, rec["l1_energy_scale"]):
            flags.append("l1_energy")
        if rec.get("log_trace_rate_slack") is not None and rec["log_trace_rate_slack"] < -tol * (1 + rec["sup_phi_prev"]):
            flags.append("log_trace_rate")
        rec["flags"] = flags
        return rec


def _sidecar(path, bundle, config, state, extra=None):
    meta = {
        "preset": bundle.name,
        "degrees": list(bundle.degrees),
        "config_hash": config_hash(config.to_dict()),
        "t": state.t,
        "field": "log_h",
        "geometry": bundle.geometry.to_dict(),
    }
    if extra:
        meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def config_hash(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _checkpoint(out_dir, bundle, config, state, tag, extra=None):
    path = Path(out_dir) / f"state_{tag}.heflow"
    save_field(path, state.S)
    _sidecar(path, bundle, config, state, extra)
    return path


def run(
    bundle: HiggsBundle,
    config: FlowConfig,
    initial: MetricState,
    K: MetricState | None = None,
    out_dir=None,
    keep_states=(),
    progress=None,
) -> FlowResult:
    """Integrate the flow from ``initial`` to ``config.t_max``.

    ``K`` is the reference metric for the functional and S-norms (default:
    the initial metric, which should already be normalised). A step that
    raises sup|Phi| or ||Phi||_L2 beyond the monotonicity slack is rejected
    and retried with half the step; ``max_halvings`` consecutive rejections
    abort the run with :class:`FlowAbort`. After ``regrow_after`` accepted
    steps at a reduced size the step doubles again, up to ``config.dt``.

    ``keep_states`` lists times (matching snapshot times) whose states are
    returned in ``FlowResult.states``.
    """
    g = bundle.geometry
    config.check_stability(g)
    K = initial if K is None else K
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    trace = FlowTrace(out / "trace.jsonl" if out else None)
    mon = _Monitor(bundle, K, config)
    state = initial.with_time(initial.t)
    ev = evaluate(bundle, state)
    result = FlowResult(trace, state, K)
    if out:
        result.checkpoints.append(_checkpoint(out, bundle, config, K, "K"))
    trace.append(mon.record("monitor", state, ev, config.dt, 0))
    snaps = [t for t in config.snapshot_times if t > state.t]
    keep = {float(t) for t in keep_states}
    if state.t in keep:
        result.states[state.t] = state
    dt = config.dt
    nstep = 0
    calm = 0
    eps = 1e-12 * max(1.0, config.t_max)
    sup_prev, l2_prev = float(np.sqrt(ev.norm2.max())), float(integrate(ev.norm2, g))
    try:
        while state.t < config.t_max - eps:
            target = config.t_max
            if snaps:
                target = min(target, snaps[0])
            halvings = 0
            while True:
                h = min(dt, target - state.t)
                landing = h == target - state.t
                new = _advance(bundle, state, ev, h, config.scheme)
                if landing:
                    new = new.with_time(target)
                ev_new = evaluate(bundle, new)
                sup_new = float(np.sqrt(ev_new.norm2.max()))
                l2_new = float(integrate(ev_new.norm2, g))
                slack = config.monotonicity_slack
                ok = sup_new <= sup_prev + slack * (1 + sup_prev) and l2_new <= l2_prev + slack * (1 + l2_prev)
                if ok or not config.adaptive:
                    break
                halvings += 1
                result.rejected += 1
                trace.append(
                    {"kind": "rejected", "t": state.t, "dt": h, "sup_phi": sup_new, "sup_phi_prev": sup_prev,
                     "phi_l2_sq": l2_new, "phi_l2_sq_prev": l2_prev}
                )
                if halvings > config.max_halvings:
                    raise FlowAbort(
                        f"step size underflow at t = {state.t:.6g} after {config.max_halvings} halvings", trace, state
                    )
                dt = h / 2
                calm = 0
            prev = (state, ev)
            state, ev = new, ev_new
            sup_prev, l2_prev = sup_new, l2_new
            nstep += 1
            calm += 1
            if dt < config.dt and calm >= config.regrow_after:
                dt = min(2 * dt, config.dt)
                calm = 0
            at_snap = bool(snaps) and abs(state.t - snaps[0]) <= eps
            if at_snap:
                snaps.pop(0)
            final = state.t >= config.t_max - eps
            if final:
                kind = "final"
            elif at_snap:
                kind = "snapshot"
            elif nstep % config.monitor_every == 0:
                kind = "monitor"
            else:
                kind = None
            if kind:
                trace.append(mon.record(kind, state, ev, dt, nstep, prev))
                if progress:
                    progress(trace.records[-1])
            if any(abs(state.t - t) <= eps for t in keep):
                result.states[float(min(keep, key=lambda t: abs(t - state.t)))] = state
            if out and config.checkpoint_every and nstep % config.checkpoint_every == 0:
                result.checkpoints.append(_checkpoint(out, bundle, config, state, f"{nstep:08d}"))
    finally:
        result.state = state
        if out:
            result.checkpoints.append(_checkpoint(out, bundle, config, state, "final"))
        trace.close()
    return result
