"""Acceptance criteria 1-16. Every tolerance is pinned below; each test records one PASS/FAIL line."""
import math

import numpy as np
import pytest

from killedmkv import rng
from killedmkv.cli import main
from killedmkv.config import bundled, load_scenario
from killedmkv.costs import (MeasureFunctional, binary_kl_control, check_p_convexity, check_pcnv_differential,
                             concave_mean_square, conditional_exit, f_divergence, fw_target, lq_terminal,
                             mean_field_lq_terminal, validate_derivatives, variance_terminal, default_atoms)
from killedmkv.dynamics import ControlField, empirical_flow, reweight, simulate_reference
from killedmkv.fixed_point import picard_solve
from killedmkv.measures import (SignedMeasureRepr, WeightedSample, flow_distance, fw_norm_sq, lecam_distance,
                                tv_distance)
from killedmkv.model import (ControlSpace, DomainSpec, InitialLaw, Scenario, controlled_drift,
                             quadratic_control_cost)
from killedmkv.oracles import halfline_survival, riccati_lq
from killedmkv.pontryagin import (SolverOptions, gateaux_check, mfg_exploitability, solve,
                                  sufficient_gap_certificate)
from killedmkv.schrodinger import gaussian_bridge, lattice_options, lattice_toy, sweep

SEED = 20240601
METRIC_SLACK = 1e-12
METRIC_TRIALS = 1000
FW_TOL = 1e-6
FW_POINTS = (0.1, 0.5, 1.0, 2.0, 5.0)
PCONV_TRIALS = 500
DERIV_TOL = 1e-6
SURVIVAL_SE = 3.0
MARTINGALE_SE = 4.0
PICARD_TOL = 1e-4
GATEAUX_REL, GATEAUX_SE = 0.02, 3.0
LQ_SLOPE_REL, LQ_J_REL = 0.02, 0.01
PYTHAGORAS_SE = 3.0
GAP_SE = 3.0
BRIDGE_REL, BRIDGE_SE = 0.05, 3.0
GAUSS_MEAN_REL, GAUSS_DRIFT_REL = 0.05, 0.10
MFG_REL, MFG_SE = 0.01, 3.0


def _pairs(gen, n_atoms=12, sparse=True):
    w = gen.dirichlet(np.full(n_atoms, 0.5), size=3)
    if sparse:
        w = w * (gen.random((3, n_atoms)) > 0.3)
        w[:, 0] += 1e-3
        w /= w.sum(axis=1, keepdims=True)
    pts = np.arange(float(n_atoms))[:, None]
    return [WeightedSample(pts, wi) for wi in w]


def test_c01_metric_sandwich(record):
    gen = rng.generator(SEED, "acceptance/metric")
    worst, axioms = np.inf, 0.0
    for _ in range(METRIC_TRIALS):
        a, b, c = _pairs(gen)
        tv, lc = tv_distance(a, b), lecam_distance(a, b)
        worst = min(worst, lc**2 - tv**2, tv - lc**2)
        axioms = max(axioms, lecam_distance(a, c) - lc - lecam_distance(b, c), abs(lc - lecam_distance(b, a)),
                     lecam_distance(a, a), -lc)
    ok = worst >= -METRIC_SLACK and axioms <= METRIC_SLACK
    record(1, "metric sandwich", ok, f"min slack {worst:.2e}, axiom violation {axioms:.2e}")
    assert ok


def test_c02_lecam_lipschitz(record):
    gen = rng.generator(SEED, "acceptance/lipschitz")
    pts = np.linspace(-3, 3, 16)
    worst = -np.inf
    for _ in range(METRIC_TRIALS):
        a, b, _ = _pairs(gen, 16)
        c0, c1, c2 = gen.standard_normal(3)
        phi = c0 + c1 * pts + c2 * pts**2
        C = 0.5 * (phi.max() - phi.min())
        lhs = abs(phi @ a.weights - phi @ b.weights)
        worst = max(worst, lhs - 4 * C * lecam_distance(a, b))
    record(2, "Le Cam Lipschitz bound", worst <= 0, f"max excess {worst:.3e}")
    assert worst <= 0


def test_c03_fw_closed_form(record):
    errs = []
    for u in FW_POINTS:
        z = SignedMeasureRepr.difference(WeightedSample(np.array([[u]]), np.ones(1)),
                                         WeightedSample(np.array([[0.0]]), np.ones(1)))
        errs.append(abs(fw_norm_sq(z, 1.0) - (1 - math.exp(-u))))
    ok = max(errs) <= FW_TOL
    record(3, "FW closed form", ok, f"max abs error {max(errs):.2e}")
    assert ok


def test_c04_p_convexity(record):
    atoms = default_atoms()
    nu = WeightedSample(atoms, np.full(len(atoms), 1.0 / len(atoms)))
    convex = [fw_target(0.6, WeightedSample(atoms[::4], np.full(8, 1 / 8))), variance_terminal()]
    convex += [f_divergence(F, nu) for F in ("neg_log", "xlogx", "half_abs", "lecam_F")]
    fails = []
    for c in convex:
        if not check_p_convexity(c, PCONV_TRIALS).passed or not check_pcnv_differential(c, PCONV_TRIALS).passed:
            fails.append(c.name)
    counter = check_p_convexity(concave_mean_square(), PCONV_TRIALS)
    ok = not fails and not counter.passed
    record(4, "p-convexity", ok, f"failing convex costs {fails}, counterexample detected {not counter.passed}")
    assert ok


def test_c05_derivatives(record):
    atoms = default_atoms()
    nu = WeightedSample(atoms, np.full(len(atoms), 1.0 / len(atoms)))
    costs = [quadratic_control_cost(), lq_terminal(), mean_field_lq_terminal(), variance_terminal(),
             concave_mean_square(), conditional_exit(0.5), conditional_exit(0.5, Psi=MeasureFunctional.variance(),
                                                                            Phi=MeasureFunctional.variance()),
             fw_target(0.6, WeightedSample(atoms[::4], np.full(8, 1 / 8))), binary_kl_control(0.05)]
    costs += [f_divergence(F, nu) for F in ("neg_log", "xlogx", "half_abs", "lecam_F")]
    reps = [validate_derivatives(c, tol=DERIV_TOL) for c in costs]
    bad = [r.name for r in reps if not r.passed]
    worst = max(r.max_violation for r in reps)
    record(5, "derivative validation", not bad, f"worst rel err {worst:.2e}, failing {bad}")
    assert not bad


def test_c06_killed_simulation(record):
    base = dict(n_steps=100, n_particles=100_000, seed=SEED, initial_law=InitialLaw("point", 1.0))
    mk = lambda bc: Scenario(DomainSpec.half_line(0.0), controlled_drift(1), ControlSpace.full_space(1),
                             quadratic_control_cost(), bridge_correction=bc, **base)
    p = halfline_survival(1.0, 1.0, 1.0)
    se = math.sqrt(p * (1 - p) / base["n_particles"])
    on = simulate_reference(mk(True)).survived.mean()
    off = simulate_reference(mk(False)).survived.mean()
    ok = abs(on - p) <= SURVIVAL_SE * se and off - p > SURVIVAL_SE * se
    record(6, "killed simulation", ok, f"corrected {on:.4f}, uncorrected {off:.4f}, exact {p:.4f}, SE {se:.1e}")
    assert ok


def test_c07_girsanov_martingale(record):
    s = Scenario(DomainSpec.full_space(1), controlled_drift(1), ControlSpace.box(-1.5, 1.5),
                 quadratic_control_cost(), n_steps=100, n_particles=10_000, seed=SEED,
                 initial_law=InitialLaw("normal", 0.0, 1.0))
    ens = simulate_reference(s)
    a = ControlField.feedback(s.controls, lambda k, t, x: np.clip(np.sin(3 * x) + t, -1.5, 1.5))
    w = reweight(ens, a, None, s.dynamics).weights
    z = np.abs(w.mean(axis=0) - 1) / np.maximum(w.std(axis=0, ddof=1) / np.sqrt(w.shape[0]), 1e-300)
    z[0] = 0.0
    ok = z.max() <= MARTINGALE_SE
    record(7, "Girsanov martingale", ok, f"max |z| {z.max():.2f}")
    assert ok


def test_c08_picard(record):
    s, opts, _, _ = load_scenario(bundled("mean_interaction"))
    ens = simulate_reference(s)
    alpha = ControlField.feedback(s.controls, lambda k, t, x: -0.5 * x)
    r1 = picard_solve(ens, alpha, s.dynamics, tol=PICARD_TOL)
    other = picard_solve(ens, ControlField.constant(s.controls, 1.0), s.dynamics, tol=PICARD_TOL).flow
    r2 = picard_solve(ens, alpha, s.dynamics, tol=PICARD_TOL, init_flow=other)
    dist = flow_distance(r1.flow, r2.flow)
    ratios = np.concatenate([r.trace[1:] / r.trace[:-1] for r in (r1, r2)])
    ok = r1.converged and r2.converged and dist <= 2 * PICARD_TOL and ratios.max() < 1
    record(8, "Picard fixed point", ok, f"flow distance {dist:.2e}, max ratio {ratios.max():.3f}")
    assert ok


def _lq(n, steps, mean0, seed=SEED):
    return Scenario(DomainSpec.full_space(1), controlled_drift(1), ControlSpace.full_space(1), lq_terminal(1.0),
                    n_steps=steps, n_particles=n, seed=seed, initial_law=InitialLaw("normal", mean0, 1.0))


def test_c09_gateaux(record):
    s = _lq(10_000, 100, 0.5)
    ens = simulate_reference(s)
    r = riccati_lq(1.0, s.T)
    gen = rng.generator(SEED, "acceptance/eta")
    eta = ControlField.open_loop(s.controls, gen.standard_normal((ens.n_particles, ens.n_steps, 1)))
    bases = [(ControlField.zero(s.controls), ControlField.constant(s.controls, 1.0)),
             (ControlField.feedback(s.controls, lambda k, t, x: r.feedback(t, x)), eta)]
    certs = [gateaux_check(ens, a, e, s.dynamics, s.cost) for a, e in bases]
    ok = all(c.passed for c in certs)
    detail = "; ".join(f"rhs {c.values['rhs']:.4f} secant {c.values['extrapolated_secant']:.4f}" for c in certs)
    record(9, "Gateaux derivative", ok, detail)
    assert ok


def test_c10_lq_reproduction(record):
    s = _lq(100_000, 100, 0.0)
    res = solve(s, SolverOptions())
    r = riccati_lq(1.0, s.T)
    tab = res.feedback.fn
    slope = tab.coef[0, 1, 0] / float(np.ravel(tab.frames[0].scale)[0])
    j_star = r.expected_cost(0.0, 1.0)
    e_slope = abs(slope + float(r.P(0.0))) / float(r.P(0.0))
    e_j = abs(res.J - j_star) / j_star
    ok = e_slope <= LQ_SLOPE_REL and e_j <= LQ_J_REL
    record(10, "LQ reproduction", ok, f"slope {slope:.4f} (rel err {e_slope:.2%}), J {res.J:.4f} vs {j_star:.4f}")
    assert ok


def test_c11_entropy_pythagoras(record):
    s = Scenario(DomainSpec.full_space(1), controlled_drift(1), ControlSpace.full_space(1),
                 quadratic_control_cost(), n_steps=100, n_particles=20_000, seed=SEED,
                 initial_law=InitialLaw("normal", 0.0, 1.0))
    opts = SolverOptions()
    res = solve(s, opts)
    ens = simulate_reference(s)
    perts = [ControlField.constant(s.controls, 0.5), ControlField.feedback(s.controls, lambda k, t, x: -0.5 * x),
             ControlField.feedback(s.controls, lambda k, t, x: np.full_like(x, np.sin(2 * np.pi * t)))]
    ok, details = True, []
    for p in perts:
        v = sufficient_gap_certificate(ens, res.control, p, s.dynamics, s.cost, opts).values
        comb = lambda a, b: math.hypot(v[a], v[b])
        pairs = [(v["dJ"] - v["quadratic"], comb("se_dJ", "se_quadratic")),
                 (v["quadratic"] - v["entropy"], comb("se_quadratic", "se_entropy")),
                 (v["dJ"] - v["entropy"], comb("se_dJ", "se_entropy"))]
        ok &= all(abs(d) <= PYTHAGORAS_SE * se for d, se in pairs)
        details.append(f"{v['dJ']:.4f}/{v['entropy']:.4f}/{v['quadratic']:.4f}")
    record(11, "entropy Pythagoras", ok, "dJ/H/Q " + ", ".join(details))
    assert ok


def test_c12_sufficient_gap(record):
    s, opts, _, _ = load_scenario(bundled("conditional_exit"))
    res = solve(s, opts)
    ens = simulate_reference(s)
    tab = res.control.values
    fb = res.feedback.table(ens)
    perts = [ControlField.open_loop(s.controls, fb + 0.3), ControlField.open_loop(s.controls, 0.5 * tab),
             ControlField.constant(s.controls, 1.0)]
    certs = [sufficient_gap_certificate(ens, res.control, p, s.dynamics, s.cost, opts) for p in perts]
    ok = all(c.passed for c in certs)
    detail = "; ".join(f"dJ {c.values['dJ']:.4f} >= Q {c.values['quadratic']:.4f} >= H {c.values['entropy']:.4f}"
                       for c in certs)
    record(12, "sufficient gap", ok, detail)
    assert ok


def test_c13_schrodinger_sweep(record):
    toy = lattice_toy(n_particles=50_000, seed=SEED % 2**31)
    ens = simulate_reference(toy.scenario)
    rep = sweep(toy.scenario, toy.target, lattice_options(toy), ens)
    v, se = rep.values[-1], rep.ses[-1]
    gap = abs(v - toy.oracle_value)
    close = gap <= max(BRIDGE_REL * toy.oracle_value, BRIDGE_SE * se)
    ok = rep.monotone and rep.fw_decreasing and close
    record(13, "Schrodinger sweep", ok,
           f"V^l {np.array2string(rep.values, precision=4)}, oracle {toy.oracle_value:.4f}, "
           f"monotone {rep.monotone}, FW decreasing {rep.fw_decreasing}, rel gap {gap / toy.oracle_value:.1%}")
    assert ok


def test_c14_gaussian_bridge(record):
    s, tgt, drift = gaussian_bridge(n_particles=20_000, n_steps=100, seed=SEED % 2**31)
    ens = simulate_reference(s)
    rep = sweep(s, tgt, SolverOptions(), ens)
    sol = rep.solutions[-1]
    target_mean = float(tgt.mu_hat.mean()[0])
    mean_T = float(sol.mu_T.mean()[0])
    e = sol.result.ensemble
    w = e.weights[:, :-1]
    fitted = float(np.sum(w * e.actions[:, :, 0]) / np.sum(w))
    e_mean = abs(mean_T - target_mean) / abs(target_mean)
    e_drift = abs(fitted - drift) / abs(drift)
    ok = e_mean <= GAUSS_MEAN_REL and e_drift <= GAUSS_DRIFT_REL
    record(14, "Gaussian bridge", ok, f"terminal mean {mean_T:.4f} vs {target_mean:.4f}, "
                                      f"drift {fitted:.4f} vs {drift:.4f} at l = {sol.l:g}")
    assert ok


def test_c15_mfg_exploitability(record):
    s, opts, _, _ = load_scenario(bundled("mean_field_lq"))
    res = solve(s, opts)
    ens = simulate_reference(s)
    c1 = mfg_exploitability(s, res.control, res.flow, ens, opts)
    bad = ControlField.open_loop(s.controls, res.control.values + 0.5)
    c2 = mfg_exploitability(s, bad, res.flow, ens, opts)
    v1, v2 = c1.values, c2.values
    ok1 = v1["exploitability"] <= max(MFG_REL * abs(v1["J_mfg"]), MFG_SE * v1["paired_se"])
    ok2 = v2["exploitability"] > MFG_SE * v2["paired_se"]
    record(15, "MFG exploitability", ok1 and ok2, f"optimizer {v1['exploitability']:.2e} (SE {v1['paired_se']:.1e}), "
                                                   f"perturbed {v2['exploitability']:.2e} (SE {v2['paired_se']:.1e})")
    assert ok1 and ok2


def test_c16_determinism(record, tmp_path):
    small = ["--particles", "3000", "--steps", "20"]
    commands = {
        "simulate": ["simulate", "--scenario", "conditional_exit"] + small,
        "solve": ["solve", "--scenario", "mean_interaction"] + small,
        "verify": ["verify", "--scenario", "mean_field_lq"] + small,
        "schrodinger": ["schrodinger", "--scenario", "gaussian_bridge", "--target",
                        str(bundled("gaussian_bridge_target"))] + small,
    }
    same = {}
    for name, args in commands.items():
        outs = []
        for threads in ("1", "8"):
            d = tmp_path / f"{name}-{threads}"
            main(args + ["--threads", threads, "--out", str(d), "--seed", "11"])
            outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
        same[name] = bool(outs[0]) and outs[0] == outs[1]
    ok = all(same.values())
    record(16, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
