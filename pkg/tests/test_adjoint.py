import numpy as np
import pytest

from killedmkv.adjoint import hamiltonian, minimize_hamiltonian, solve_adjoint
from killedmkv.costs import binary_kl_control, lq_terminal
from killedmkv.dynamics import ControlField, empirical_flow, reweight, simulate_reference
from killedmkv.model import (ControlSpace, DomainSpec, DynamicsSpec, InitialLaw, Scenario, controlled_drift,
                             quadratic_control_cost)
from killedmkv.oracles import riccati_lq


def test_closed_form_matches_projected_gradient():
    gen = np.random.default_rng(0)
    x = gen.standard_normal((50, 1))
    z = 2.0 * gen.standard_normal((50, 1))
    space = ControlSpace.box(-0.8, 0.8)
    cost = quadratic_control_cost()
    a_cf = minimize_hamiltonian(0.0, x, None, 1.0, z, controlled_drift(1), cost, space)
    assert np.allclose(a_cf, np.clip(-z, -0.8, 0.8))
    # the same problem through a general (non-affine flagged) drift goes the iterative route
    dyn = controlled_drift(1)
    general = DynamicsSpec(**{**dyn.__dict__, "beta_mode": "general"})
    a_pg = minimize_hamiltonian(0.0, x, None, 1.0, z, general, cost, space)
    assert np.allclose(a_pg, a_cf, atol=1e-6)
    h_best = hamiltonian(0.0, x, a_cf, None, 1.0, z, dyn, cost)
    for trial in np.linspace(-0.8, 0.8, 9):
        assert np.all(h_best <= hamiltonian(0.0, x, np.full_like(x, trial), None, 1.0, z, dyn, cost) + 1e-12)


def test_binary_kl_argmin():
    dt = 0.05
    cost = binary_kl_control(dt)
    z = np.linspace(-3, 3, 7)[:, None]
    x = np.zeros_like(z)
    a = minimize_hamiltonian(0.0, x, None, 1.0, z, controlled_drift(1), cost, ControlSpace.full_space(1))
    assert np.allclose(a[:, 0], -np.tanh(z[:, 0] * np.sqrt(dt)) / np.sqrt(dt))


def test_lq_adjoint_matches_riccati():
    T, n_steps = 1.0, 20
    s = Scenario(DomainSpec.full_space(1), controlled_drift(1), ControlSpace.full_space(1), lq_terminal(1.0),
                 T=T, n_steps=n_steps, n_particles=20_000, seed=3, initial_law=InitialLaw("normal", 0.0, 1.0))
    ens = simulate_reference(s)
    r = riccati_lq(1.0, T)
    alpha = ControlField.feedback(s.controls, lambda k, t, x: r.feedback(t, x))
    e = reweight(ens, alpha, None, s.dynamics)
    sol = solve_adjoint(e, empirical_flow(e), s.dynamics, s.cost)
    k = n_steps // 2
    x = e.paths[:, k]
    slope = np.polyfit(x[:, 0], sol.Z[:, k, 0], 1, w=e.weights[:, k])[0]
    assert abs(slope - r.P(e.times[k])) < 0.05
    v0 = np.average(sol.Y[:, 0])
    assert abs(v0 - r.expected_cost(0.0, 1.0)) < 0.03
    assert np.all(sol.r2[:-1] > 0.8)
