"""Command-line entry point: simulate, solve, schrodinger, verify, oracle."""
from __future__ import annotations

import argparse
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import oracles
from .config import ConfigError, bundled, load_scenario, load_target
from .costs import check_p_convexity, check_pcnv_differential, validate_derivatives
from .dynamics import ControlField, simulate_reference
from .measures import WeightedSample, lecam_distance, tv_distance
from .model import validate_scenario
from .pontryagin import (ScopeError, SolverOptions, bmo_estimate, first_order_residual, gateaux_check,
                         mfg_exploitability, solve, sufficient_gap_certificate)
from .schrodinger import sweep
from . import rng

EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4


class InvalidScenarioError(ValueError):
    pass


def _header(chash, seed):
    return f"config_hash={chash} seed={seed}"


def _write(out: Path, name: str, text: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _load(args):
    if not args.scenario:
        raise ConfigError("--scenario is required")
    s, opts, cfg, chash = load_scenario(args.scenario)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.particles is not None:
        kw["n_particles"] = args.particles
    if args.steps is not None:
        kw["n_steps"] = args.steps
    s = replace(s, **kw)
    opts = replace(opts, threads=args.threads)
    diag = validate_scenario(s)
    if diag:
        raise InvalidScenarioError("; ".join(diag))
    # the hash covers the overrides so reruns are identified exactly
    chash = f"{chash}-{s.seed}-{s.n_particles}-{s.n_steps}"
    return s, opts, chash


def _flow_summary(flow, header):
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    d = flow.laws[0].dim
    buf.write(",".join(["time", "survival"] + [f"mean_x{j}" for j in range(d)] + ["variance"]) + "\n")
    for t, p, law in zip(flow.times, flow.survival, flow.laws):
        vals = [t, p, *law.mean(), law.variance()]
        buf.write(",".join(f"{v:.17g}" for v in vals) + "\n")
    return buf.getvalue()


def _feedback_csv(fb, times, header):
    tab = fb.fn
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    nb = tab.coef.shape[1]
    k = tab.coef.shape[2]
    cols = ["step", "time", "center", "scale"] + [f"coef_{i}_{j}" for j in range(k) for i in range(nb)]
    buf.write(",".join(cols) + "\n")
    for step, (fr, c) in enumerate(zip(tab.frames, tab.coef)):
        center = float(np.ravel(fr.center)[0])
        scale = float(np.ravel(fr.scale)[0])
        vals = [center, scale, *c.T.ravel()]
        buf.write(f"{step},{times[step]:.10g}," + ",".join(f"{v:.17g}" for v in vals) + "\n")
    return buf.getvalue()


def _cert_csv(rows, header):
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    buf.write("check,passed,quantity,value\n")
    for name, passed, vals in rows:
        for key, v in vals.items():
            buf.write(f"{name},{int(passed)},{key},{v:.17g}\n")
    return buf.getvalue()


# --- commands ---------------------------------------------------------------

def cmd_simulate(args):
    s, opts, chash = _load(args)
    ens = simulate_reference(s, threads=args.threads)
    out = Path(args.out)
    _write(out, "summary.csv", ens.summary_csv(_header(chash, s.seed)))
    (out / "ensemble.bin").write_bytes(ens.to_bytes())
    print(f"survival at T: {ens.survived.mean():.6f}")
    return 0


def _solve_outputs(s, opts, chash, out):
    res = solve(s, opts)
    h = _header(chash, s.seed)
    _write(out, "trace.csv", res.trace_csv(h))
    _write(out, "control.csv", _feedback_csv(res.feedback, res.ensemble.times, h))
    _write(out, "flow.csv", _flow_summary(res.flow, h))
    _write(out, "adjoint.csv", res.adjoint.summary_csv(res.ensemble.times, header=h))
    return res


def cmd_solve(args):
    s, opts, chash = _load(args)
    out = Path(args.out)
    res = _solve_outputs(s, opts, chash, out)
    foc = first_order_residual(res, s.dynamics, s.cost, s.controls, seed=s.seed)
    bmo, _ = bmo_estimate(res.ensemble)
    rows = [("first_order", foc >= -1e-3, {"min_directional": foc}),
            ("bmo", np.isfinite(bmo), {"bmo_lower_bound": bmo})]
    _write(out, "certificates.csv", _cert_csv(rows, _header(chash, s.seed)))
    print(f"J = {res.J:.6f} +- {res.SE:.6f}, p_T = {res.flow.survival[-1]:.6f}, converged = {res.converged}")
    return 0


def cmd_schrodinger(args):
    s, opts, chash = _load(args)
    if not args.target:
        raise ConfigError("--target is required")
    tgt, thash = load_target(args.target)
    diag = tgt.diagnostics(s.domain)
    if diag:
        raise InvalidScenarioError("; ".join(diag))
    rep = sweep(s, tgt, opts)
    _write(Path(args.out), "bridge_report.csv", rep.to_csv(_header(f"{chash}+{thash}", s.seed)))
    for p in rep.solutions:
        print(f"l = {p.l:g}: V = {p.V:.6f} +- {p.SE:.6f}, fw_gap_sq = {p.fw_gap_sq:.3e}")
    return 0


def _metric_battery(seed, n=200):
    gen = rng.generator(seed, "verify/metric")
    worst = np.inf
    axioms = True
    pts = np.arange(8.0)[:, None]
    for _ in range(n):
        w = gen.dirichlet(np.ones(8), size=3)
        a, b, c = (WeightedSample(pts, wi) for wi in w)
        tv, lc = tv_distance(a, b), lecam_distance(a, b)
        worst = min(worst, lc**2 - tv**2, tv - lc**2)
        axioms &= lecam_distance(a, c) <= lc + lecam_distance(b, c) + 1e-12
        axioms &= abs(lc - lecam_distance(b, a)) <= 1e-15 and lecam_distance(a, a) <= 1e-15
    return bool(worst >= -1e-12 and axioms), {"min_slack": float(worst)}


def cmd_verify(args):
    s, opts, chash = _load(args)
    out = Path(args.out)
    checks = []

    def add(name, passed, vals):
        checks.append({"name": name, "passed": bool(passed),
                       "values": {k: float(v) for k, v in vals.items()}})

    add("metric_sandwich", *_metric_battery(s.seed))
    rep = validate_derivatives(s.cost, seed=s.seed)
    add("derivatives", rep.passed, {"max_violation": rep.max_violation})
    rep = check_p_convexity(s.cost, trials=100, seed=s.seed)
    add("p_convexity", rep.passed, {"max_violation": rep.max_violation})
    rep = check_pcnv_differential(s.cost, trials=100, seed=s.seed)
    add("p_convexity_differential", rep.passed, {"max_violation": rep.max_violation})
    res = _solve_outputs(s, opts, chash, out)
    add("solver_converged", res.converged, {"J": res.J, "SE": res.SE})
    foc = first_order_residual(res, s.dynamics, s.cost, s.controls, seed=s.seed)
    add("first_order", foc >= -1e-3, {"min_directional": foc})
    ens = simulate_reference(s, threads=args.threads)
    gen = rng.generator(s.seed, "verify/eta")
    eta = ControlField.open_loop(s.controls, gen.standard_normal((ens.n_particles, ens.n_steps, s.controls.k)))
    cert = gateaux_check(ens, res.control, eta, s.dynamics, s.cost, basis=opts.basis, opts=opts)
    add("gateaux", cert.passed, cert.values)
    shifted = ControlField.open_loop(s.controls, s.controls.project(res.control.values + 0.5))
    cert = sufficient_gap_certificate(ens, res.control, shifted, s.dynamics, s.cost, opts)
    add("sufficient_gap", cert.passed, cert.values)
    bmo, _ = bmo_estimate(res.ensemble)
    add("bmo", np.isfinite(bmo), {"bmo_lower_bound": bmo})
    try:
        cert = mfg_exploitability(s, res.control, res.flow, ens, opts)
        add("mfg_exploitability", cert.passed, cert.values)
    except ScopeError:
        pass
    manifest = {"schema": "killedmkv-verify/1", "config_hash": chash, "seed": s.seed,
                "all_passed": all(c["passed"] for c in checks), "checks": checks}
    _write(out, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for c in checks:
        print(f"{c['name']}: {'PASS' if c['passed'] else 'FAIL'}")
    return 0 if manifest["all_passed"] else EXIT_FAIL


def cmd_oracle(args):
    name = args.name
    if name == "riccati":
        r = oracles.riccati_lq(args.q, args.T)
        print(f"P_0 = {float(r.P(0.0)):.12g}")
        print(f"c_0 = {float(r.c(0.0)):.12g}")
    elif name == "survival":
        print(f"survival = {oracles.halfline_survival(args.x0, args.sigma, args.t):.12g}")
    elif name == "fw":
        print(f"fw_norm_sq = {oracles.fw_dirac_identity(args.u):.12g}")
    elif name == "sinkhorn-toy":
        from .schrodinger import lattice_toy
        toy = lattice_toy(depth=args.depth)
        print(f"value = {toy.oracle_value:.12g}")
    else:
        raise ConfigError(f"unknown oracle {name!r}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file (or bundled name)")
    common.add_argument("--target", help="bridge target JSON file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--particles", type=int, default=None)
    common.add_argument("--steps", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    p = argparse.ArgumentParser(prog="killedmkv", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "solve", "schrodinger", "verify"):
        sub.add_parser(name, parents=[common])
    o = sub.add_parser("oracle", parents=[common])
    o.add_argument("name", choices=["riccati", "survival", "fw", "sinkhorn-toy"])
    o.add_argument("--q", type=float, default=1.0)
    o.add_argument("--T", type=float, default=1.0)
    o.add_argument("--x0", type=float, default=1.0)
    o.add_argument("--sigma", type=float, default=1.0)
    o.add_argument("--t", type=float, default=1.0)
    o.add_argument("--u", type=float, default=1.0)
    o.add_argument("--depth", type=int, default=12)
    return p


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "schrodinger": cmd_schrodinger,
            "verify": cmd_verify, "oracle": cmd_oracle}


def _resolve(path):
    if path and not Path(path).exists() and bundled(path).exists():
        return str(bundled(path))
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.scenario = _resolve(args.scenario)
    if args.threads < 1:
        print("error InvalidArgument: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error ConfigError: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidScenarioError as e:
        print(f"error InvalidScenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
