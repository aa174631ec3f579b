"""Command-line experiment runner: ``heflow run|oracle|analyze|check``.

Exit codes: 0 success, 1 hard error (bad config, missing artifact, aborted
flow), 2 completed but with monitor flags beyond ``output.max_flags``, an
oracle mismatch, an untrusted or inconclusive report, or a failed self-check.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, analysis, fiber
from .flow import FlowAbort, FlowConfig, NormalizationError, config_hash, matrix_inequality_check, normalize_initial, run
from .functional import donaldson_closed, donaldson_path
from .geometry import TorusGeometry, integrate, load_field, save_field
from .higgs import MetricState, bundle_from_constants, evaluate, phi, preset, random_state
from .oracle import ConstantHiggsData, matrix_ode, scalar_exact

log = logging.getLogger("heflow")

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2
SUMMARY_SCHEMA = "heflow.run_summary/1"


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# --- configuration ---------------------------------------------------------------


def schema() -> dict:
    return json.loads(resources.files("heflow").joinpath("config_schema.json").read_text())


def _key_path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"{_key_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration\n  " + "\n  ".join(lines))


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"config file not found: {path}")
    text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    validate_config(cfg)
    return cfg


# checkpoint cadence lives in the output section
_FLOW_DEFAULTS = {
    f.name: f.default
    for f in dataclasses.fields(FlowConfig)
    if f.default is not dataclasses.MISSING and f.name != "checkpoint_every"
}


def resolve_config(cfg: dict) -> dict:
    """Fill every default so that the result alone reproduces the experiment."""
    cfg = copy.deepcopy(cfg)
    out = {"schema_version": 1, "seed": cfg.get("seed", 0)}
    geo = {"tau_re": 0.0, "tau_im": 1.0, "area_scale": 1.0}
    geo.update(cfg["geometry"])
    out["geometry"] = geo
    bundle = dict(cfg["bundle"])
    if "preset" in bundle:
        bundle.setdefault("strength", 1.0)
    else:
        r = len(bundle["degrees"])
        zero = [[0.0] * r for _ in range(r)]
        bundle.setdefault("a", zero)
        bundle.setdefault("theta", zero)
    out["bundle"] = bundle
    init = {"kind": "random", "amplitude": 0.5, "band": geo["grid_n"] // 4, "decay": 3.0, "normalize": True}
    init.update(cfg.get("initial", {}))
    out["initial"] = init
    flow = dict(_FLOW_DEFAULTS)
    flow["snapshot_times"] = []
    user_flow = dict(cfg["flow"])
    factor = user_flow.pop("dt_factor", None)
    flow.update(user_flow)
    if "dt" not in user_flow:
        g = make_geometry(out)
        flow["dt"] = (1.0 if factor is None else factor) * g.stability_dt()
    flow["snapshot_times"] = sorted(float(t) for t in flow["snapshot_times"])
    out["flow"] = {k: flow[k] for k in sorted(flow)}
    output = {"directory": "heflow_run", "checkpoint_every": 0, "max_flags": 0}
    output.update(cfg.get("output", {}))
    out["output"] = output
    if "oracle" in cfg:
        orc = {"times": [0.5], "tolerance": 1e-6 if cfg["oracle"]["kind"] == "scalar" else 1e-8}
        orc.update(cfg["oracle"])
        out["oracle"] = orc
    ana = {"cluster_threshold": 1e-2, "l1_floor": 1e-8, "ramp": 0.1, "residual_threshold": 1e-3}
    ana.update(cfg.get("analysis", {}))
    out["analysis"] = ana
    validate_config(out)
    return out


def _matrix(rows) -> np.ndarray:
    return np.array([[complex(*e) if isinstance(e, list) else complex(e) for e in row] for row in rows])


def make_geometry(cfg) -> TorusGeometry:
    g = cfg["geometry"]
    return TorusGeometry(complex(g["tau_re"], g["tau_im"]), g["area_scale"], g["grid_n"])


def make_bundle(cfg, geometry=None):
    g = geometry or make_geometry(cfg)
    b = cfg["bundle"]
    if "preset" in b:
        a = _matrix(b["a"]) if "a" in b else None
        theta = _matrix(b["theta"]) if "theta" in b else None
        return preset(b["preset"], g, b.get("strength", 1.0), a, theta)
    r = len(b["degrees"])
    a, theta = _matrix(b["a"]), _matrix(b["theta"])
    if a.shape != (r, r) or theta.shape != (r, r):
        raise ConfigError(f"bundle.a and bundle.theta must be {r} x {r}")
    return bundle_from_constants(g, b["degrees"], a, theta)


def make_initial(cfg, bundle) -> MetricState:
    init = cfg["initial"]
    if init["kind"] == "identity":
        return MetricState.identity(bundle)
    if init["kind"] == "constant":
        if "log_h" not in init:
            raise ConfigError("initial.log_h is required for kind 'constant'")
        s = _matrix(init["log_h"])
        if s.shape != (bundle.rank, bundle.rank) or np.any(bundle.twist):
            raise ConfigError("initial.log_h needs an untwisted bundle of matching rank")
        s = fiber.herm_part(s)
        g = bundle.geometry
        return MetricState.from_hat(g, bundle.twist, np.broadcast_to(s, (g.grid_n, g.grid_n) + s.shape).copy())
    return random_state(bundle, seed=cfg["seed"], amplitude=init["amplitude"], band=init["band"], decay=init["decay"])


def make_flow_config(cfg, **overrides) -> FlowConfig:
    f = dict(cfg["flow"])
    f["snapshot_times"] = tuple(f["snapshot_times"])
    f.update(overrides)
    return FlowConfig(**f)


# --- subcommands -----------------------------------------------------------------


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _record_summary(rec):
    keys = ("t", "sup_phi", "phi_l2", "phi_l2_sq", "mu", "s_l1", "det_drift", "sup_tr_phi")
    return {k: rec.get(k) for k in keys}


def cmd_run(cfg: dict, out: Path) -> int:
    g = make_geometry(cfg)
    bundle = make_bundle(cfg, g)
    H0 = make_initial(cfg, bundle)
    K = normalize_initial(bundle, H0) if cfg["initial"]["normalize"] else H0
    fc = make_flow_config(cfg, checkpoint_every=cfg["output"]["checkpoint_every"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status = "completed"
    try:
        res = run(bundle, fc, K, out_dir=out, progress=lambda r: log.info(
            "t=%.4g sup|Phi|=%.4e ||Phi||_L2=%.4e", r["t"], r["sup_phi"], r["phi_l2"]))
        trace = res.trace
    except FlowAbort as exc:
        status, trace = f"aborted: {exc}", exc.trace
        res = None
    recs = trace.accepted
    flags = [f for r in recs for f in r.get("flags", [])]
    counts = {f: flags.count(f) for f in sorted(set(flags))}
    files = {p.name: analysis.file_sha256(p) for p in sorted(out.glob("*")) if p.suffix in (".heflow", ".jsonl")}
    summary = {
        "schema": SUMMARY_SCHEMA,
        "version": __version__,
        "status": status,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "flow_config_hash": config_hash(fc.to_dict()),
        "bundle": bundle.describe(),
        "initial": _record_summary(recs[0]),
        "final": _record_summary(recs[-1]),
        "rejected_steps": res.rejected if res else None,
        "flag_counts": counts,
        "runtime_s": time.perf_counter() - t0,
        "files": files,
    }
    _write_json(out / "summary.json", summary)
    log.info("final sup|Phi| = %.4e, ||Phi||_L2 = %.4e, mu = %s", recs[-1]["sup_phi"], recs[-1]["phi_l2"], recs[-1]["mu"])
    if res is None:
        log.error(status)
        return EXIT_ERROR
    if len(flags) > cfg["output"]["max_flags"]:
        log.warning("%d monitor flags (allowed %d): %s", len(flags), cfg["output"]["max_flags"], counts)
        return EXIT_FLAGGED
    return EXIT_OK


def scalar_oracle_table(cfg: dict) -> list:
    """Flow versus the exact Fourier solution for rank-1 untwisted data."""
    g = make_geometry(cfg)
    bundle = make_bundle(cfg, g)
    if bundle.rank != 1 or np.any(bundle.twist):
        raise ConfigError("the scalar oracle needs a rank-1 bundle of degree 0")
    H0 = make_initial(cfg, bundle)
    times = [float(t) for t in cfg["oracle"]["times"]]
    phi0 = phi(bundle, H0).values[..., 0, 0].real
    fc = make_flow_config(cfg, t_max=max(times), snapshot_times=tuple(times), functional=False, lemma4=False)
    res = run(bundle, fc, H0, keep_states=times)
    rows = []
    for t in times:
        got = phi(bundle, res.states[t]).values[..., 0, 0].real
        want = scalar_exact(phi0, t, g.tau, g.c)
        rows.append({"oracle": "scalar", "t": t, "sup_diff": float(np.max(np.abs(got - want))),
                     "sup_exact": float(np.max(np.abs(want)))})
    return rows


def matrix_oracle_table(cfg: dict) -> list:
    """Flow versus the matrix ODE for spatially constant untwisted data."""
    g = make_geometry(cfg)
    bundle = make_bundle(cfg, g)
    if np.any(bundle.twist) or len(set(bundle.degrees)) != 1:
        raise ConfigError("the matrix oracle needs equal degrees and no twist")
    H0 = make_initial(cfg, bundle)
    s0 = H0.S_hat
    if np.max(np.abs(s0 - s0[:1, :1])) > 0:
        raise ConfigError("the matrix oracle needs a constant initial metric (initial.kind 'constant' or 'identity')")
    times = [float(t) for t in cfg["oracle"]["times"]]
    data = ConstantHiggsData(bundle.a.values[0, 0], bundle.theta.values[0, 0], g.c, g.volume, bundle.degrees[0])
    lam, u = fiber.eigh(s0[0, 0])
    h0 = fiber.from_eig(np.exp(lam), u)
    want = matrix_ode(data, h0, times)
    fc = make_flow_config(cfg, t_max=max(times), snapshot_times=tuple(times), functional=False, lemma4=False)
    res = run(bundle, fc, H0, keep_states=times)
    rows = []
    for t, hw in zip(times, want):
        hg = res.states[t].h_hat
        rows.append({"oracle": "matrix_ode", "t": t, "sup_diff": float(np.max(np.abs(hg - hw))),
                     "sup_exact": float(np.max(np.abs(hw)))})
    return rows


def cmd_oracle(cfg: dict, out: Path) -> int:
    if "oracle" not in cfg:
        raise ConfigError("oracle: section missing from config")
    kind = cfg["oracle"]["kind"]
    rows = scalar_oracle_table(cfg) if kind == "scalar" else matrix_oracle_table(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_json(out / "oracle_summary.json", {"config": cfg, "rows": rows})
    worst = max(r["sup_diff"] for r in rows)
    log.info("%s oracle: max sup-difference %.3e (tolerance %.1e)", kind, worst, cfg["oracle"]["tolerance"])
    return EXIT_OK if worst <= cfg["oracle"]["tolerance"] else EXIT_FLAGGED


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _load_state(path: Path) -> MetricState:
    meta = json.loads(_require(Path(str(path) + ".json")).read_text())
    return MetricState(load_field(path), float(meta["t"]))


def cmd_analyze(run_dir: Path, out: Path, overrides: dict | None = None) -> int:
    summary = json.loads(_require(run_dir / "summary.json").read_text())
    cfg = summary["config"]
    ana = dict(cfg["analysis"])
    ana.update(overrides or {})
    trace_path = _require(run_dir / "trace.jsonl")
    k_path = _require(run_dir / "state_K.heflow")
    g = make_geometry(cfg)
    bundle = make_bundle(cfg, g)
    K = _load_state(k_path)
    candidates = sorted((p for p in run_dir.glob("state_*.heflow") if p != k_path),
                        key=lambda p: _load_state(p).t, reverse=True)
    if not candidates:
        raise MissingArtifact(f"missing artifact: no state checkpoints besides {k_path.name} in {run_dir}")
    recs = analysis._records(trace_path)
    growth = analysis.l1_growth([r["t"] for r in recs], [r["s_l1"] for r in recs])
    chosen = None
    for path in candidates:
        H = _load_state(path)
        try:
            analysis.normalized_log(K, H, ana["l1_floor"])
        except analysis.StableRegimeError:
            continue
        chosen = (path, H)
        break
    if chosen is None:
        print(f"notice: flow has not left the stable regime (||S||_L1 below floor in {run_dir}); no report written")
        return EXIT_OK
    path, H = chosen
    try:
        rep = analysis.destabilizing_report(
            bundle, K, H, ana["cluster_threshold"], growth, ana["l1_floor"], ana["ramp"], ana["residual_threshold"]
        )
    except (analysis.ClusteringError, analysis.RampError) as exc:
        print(f"analysis inconclusive: {exc}")
        return EXIT_FLAGGED
    out.mkdir(parents=True, exist_ok=True)
    files = {"trace": trace_path, "reference_metric": k_path, "metric": path}
    for pr in rep.projections:
        p = out / f"pi_{pr.alpha}.heflow"
        save_field(p, pr.field)
        files[f"pi_{pr.alpha}"] = p
    doc = rep.to_document(files, bundle)
    doc["analysis_config"] = ana
    _write_json(out / "report.json", doc)
    log.info("nu = %.6g (trusted: %s); clusters %s", rep.nu.nu, rep.nu.trusted, rep.clusters.values.tolist())
    return EXIT_OK if rep.nu.trusted else EXIT_FLAGGED


# --- self-check ------------------------------------------------------------------


def _check_lemma4():
    from .flow import lemma4_residuals, step

    g = TorusGeometry(1j, 1.0, 64)
    b = preset("nilpotent_higgs", g)
    K = normalize_initial(b, random_state(b, seed=0, amplitude=0.5, band=4, decay=6.0))
    H = step(b, K, 1e-4, "log_rk4").with_time(1e-4)
    res = lemma4_residuals(b, K, H)
    return max(res.r1, res.r2) <= 1e-3, {"r1": res.r1, "r2": res.r2}


def _check_matrix_inequality():
    res = matrix_inequality_check()
    return res["passed"], res


def _check_identities():
    dp = analysis.dP_identity_check([-1.0, 0.0, 0.5, 2.0])
    conv = analysis.psi_limit_check([1e2, 1e3, 1e4], 1.0, 0.0)
    div = analysis.psi_limit_check([1e2, 1e3, 1e4], 0.0, 1.0)
    ok = dp["residual"] <= 1e-3 and conv["ok"] and div["diverged"]
    return ok, {"dP_residual": dp["residual"], "psi_residual": conv["residual"], "psi_diverged": div["diverged"]}


def _check_path_independence():
    g = TorusGeometry(0.2 + 1.1j, 2.0, 64)
    b = preset("split_unstable", g)
    K = normalize_initial(b, random_state(b, seed=1, amplitude=0.4, band=4, decay=6.0))
    H = random_state(b, seed=2, amplitude=0.6, band=4, decay=6.0)
    closed = donaldson_closed(b, K, H)
    geo = donaldson_path(b, K, H, "geodesic")
    lin = donaldson_path(b, K, H, "linear")
    scale = max(abs(closed), 1e-300)
    err = max(abs(closed - geo), abs(closed - lin), abs(geo - lin)) / scale
    return err <= 1e-5, {"closed": closed, "geodesic": geo, "linear": lin, "relative_spread": err}


def _check_normalization():
    g = TorusGeometry(1j, 1.0, 16)
    b = preset("extension_O_O", g)
    K = normalize_initial(b, random_state(b, seed=3))
    ev = evaluate(b, K)
    val = float(np.max(np.abs(ev.trace())))
    return val <= 1e-8 * max(1.0, float(np.sqrt(ev.norm2.max()))), {"sup_tr_phi": val}


def _check_checkpoint(tmp: Path):
    g = TorusGeometry(0.3 + 1j, 1.5, 8)
    b = preset("split_unstable", g)
    S = random_state(b, seed=4).S
    p = tmp / "roundtrip.heflow"
    save_field(p, S)
    back = load_field(p)
    p.unlink()
    same = back.geometry == g and np.array_equal(back.values, S.values) and np.array_equal(back.twist, S.twist)
    return bool(same), {"twist": S.twist.tolist()}


def _check_smoothing():
    # single Fourier mode: both sides of the smoothing bound are known exactly
    g = TorusGeometry(1j, 1.0, 16)
    x, _ = g.mesh
    phi0 = np.cos(2 * np.pi * x)
    lhs = float(np.max(np.abs(scalar_exact(phi0, 1.0, g.tau, g.c)))) ** 2
    rhs = analysis.heat_kernel_constant(g)["value"] * float(integrate(phi0**2, g))
    return rhs - lhs >= -1e-6 * (lhs + rhs), {"lhs": lhs, "rhs": rhs}


def cmd_check(out: Path | None) -> int:
    import tempfile

    suites = {
        "lemma4_residuals": _check_lemma4,
        "matrix_inequality": _check_matrix_inequality,
        "spectral_identities": _check_identities,
        "path_independence": _check_path_independence,
        "normalization": _check_normalization,
        "heat_kernel": _check_smoothing,
    }
    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        suites["checkpoint_roundtrip"] = lambda: _check_checkpoint(Path(tmp))
        for name, fn in suites.items():
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing suite is a failed suite
                ok, detail = False, {"error": repr(exc)}
            results[name] = {"passed": bool(ok), "detail": detail, "seconds": time.perf_counter() - t0}
            print(f"{'PASS' if ok else 'FAIL'} {name}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "check.json", results)
    return EXIT_OK if all(r["passed"] for r in results.values()) else EXIT_FLAGGED


# --- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    p = _Parser(prog="heflow", description="Donaldson heat flow for Higgs bundles on flat tori")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", parents=[common], help="integrate the flow from a config")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
    o = sub.add_parser("oracle", parents=[common], help="compare the flow with a reference solution")
    o.add_argument("--config", required=True, type=Path)
    o.add_argument("--out", type=Path)
    a = sub.add_parser("analyze", parents=[common], help="extract the destabilising data of a finished run")
    a.add_argument("run_dir", type=Path)
    a.add_argument("--config", type=Path, help="config whose 'analysis' section overrides the run's")
    a.add_argument("--out", type=Path, help="report directory (default: the run directory)")
    c = sub.add_parser("check", parents=[common], help="run the invariant self-checks")
    c.add_argument("--out", type=Path)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    try:
        if args.command == "run":
            cfg = resolve_config(load_config(args.config))
            return cmd_run(cfg, args.out or Path(cfg["output"]["directory"]))
        if args.command == "oracle":
            cfg = resolve_config(load_config(args.config))
            return cmd_oracle(cfg, args.out or Path(cfg["output"]["directory"]))
        if args.command == "analyze":
            overrides = None
            if args.config:
                overrides = resolve_config(load_config(args.config))["analysis"]
            return cmd_analyze(args.run_dir, args.out or args.run_dir, overrides)
        return cmd_check(args.out)
    except (ConfigError, MissingArtifact, NormalizationError, OSError, ValueError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
