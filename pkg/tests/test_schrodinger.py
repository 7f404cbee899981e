import numpy as np
import pytest

from killedmkv.dynamics import simulate_reference
from killedmkv.measures import WeightedSample
from killedmkv.model import DomainSpec
from killedmkv.schrodinger import (BridgeTarget, lattice_options, lattice_toy, solve_penalized, sweep,
                                   value_identity)


@pytest.fixture(scope="module")
def small_sweep():
    toy = lattice_toy(depth=6, n_particles=10_000, l_list=(1.0, 4.0, 16.0, 64.0))
    ens = simulate_reference(toy.scenario)
    return toy, ens, sweep(toy.scenario, toy.target, lattice_options(toy), ens)


def test_target_diagnostics():
    mu = WeightedSample(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]))
    assert BridgeTarget(0.5, mu).diagnostics(DomainSpec.half_line(0.0)) == ["mu_hat supported in D violated"]
    assert "p_hat in (0, 1] violated" in BridgeTarget(1.5, mu).diagnostics()
    assert BridgeTarget(0.5, mu, l_list=(4.0, 1.0)).diagnostics()


def test_sweep_properties(small_sweep):
    toy, ens, rep = small_sweep
    assert rep.monotone and rep.fw_decreasing
    assert np.all(rep.values <= toy.oracle_value + 3 * rep.ses)
    assert rep.potential_r2 > 0.9
    lines = rep.to_csv("h").splitlines()
    assert lines[0] == "# h" and lines[1].startswith("l,V,SE")


def test_value_is_relative_entropy(small_sweep):
    # on the lattice the running cost is the per-step relative entropy, so J = E[E_T log E_T]
    toy, ens, rep = small_sweep
    sol = rep.solutions[-1]
    e = sol.result.ensemble
    from killedmkv.dynamics import cost_contributions
    from killedmkv.costs import binary_kl_control
    c = cost_contributions(e, sol.result.flow, binary_kl_control(e.dt))
    assert abs(c.mean() - sol.entropy) < 3 * c.std() / np.sqrt(c.size) + 1e-3


def test_gaussian_value_identity():
    from killedmkv.dynamics import ControlField, reweight
    from killedmkv.schrodinger import gaussian_bridge
    s, tgt, drift = gaussian_bridge(n_particles=5000, n_steps=20)
    ens = simulate_reference(s)
    e = reweight(ens, ControlField.constant(s.controls, drift), None, s.dynamics)
    J, H, se = value_identity(e)
    assert J == pytest.approx(0.5 * drift**2, rel=0.02)
    assert abs(J - H) < 4 * se


@pytest.mark.slow
def test_penalty_converges_to_oracle():
    """V^l reaches the killed Sinkhorn value once l is large enough (l = 1024 at depth 12)."""
    toy = lattice_toy(n_particles=20_000)
    ens = simulate_reference(toy.scenario)
    opts = lattice_options(toy, outer_iters=200)
    alpha = None
    for l in (256.0, 1024.0):
        sol = solve_penalized(toy.scenario, toy.target, l, opts, alpha0=alpha, ens=ens)
        alpha = sol.control
    assert abs(sol.V - toy.oracle_value) <= max(0.05 * toy.oracle_value, 3 * sol.SE)
