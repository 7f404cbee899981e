import numpy as np
import pytest

from killedmkv.costs import lq_terminal
from killedmkv.model import (ControlSpace, DomainSpec, DynamicsSpec, InitialLaw, Scenario,
                             SingularVolatilityError, beta_eval, controlled_drift, quadratic_control_cost,
                             validate_scenario)


def _scenario(**kw):
    base = dict(domain=DomainSpec.half_line(0.0), dynamics=controlled_drift(1), controls=ControlSpace.full_space(1),
                cost=quadratic_control_cost(), initial_law=InitialLaw("point", 1.0))
    base.update(kw)
    return Scenario(**base)


def test_valid_scenario_has_no_diagnostics():
    assert validate_scenario(_scenario()) == []


def test_inverted_interval():
    diag = validate_scenario(_scenario(domain=DomainSpec.interval(1.0, 0.0)))
    assert "lo < hi violated" in diag


def test_uncentered_derivative_flagged():
    c = quadratic_control_cost(g=lambda x, mu, p: np.zeros(len(x)),
                               dm_g=lambda x, mu, p, y: np.atleast_2d(y)[:, 0][None, :])
    s = _scenario(domain=DomainSpec.interval(0.0, 1.0), cost=c, initial_law=InitialLaw("point", 0.5))
    assert any("derivative not centered" in m for m in validate_scenario(s))


def test_initial_law_outside_domain():
    s = _scenario(initial_law=InitialLaw("point", -1.0))
    assert "initial law supported in D violated" in validate_scenario(s)


def test_beta_examples():
    dyn = controlled_drift(2)
    assert np.allclose(beta_eval(dyn, 0.0, np.zeros((1, 2)), np.array([[1.0, 2.0]])), [[1, 2]])
    dyn = controlled_drift(2, sigma=2.0)
    assert np.allclose(beta_eval(dyn, 0.0, np.zeros((1, 2)), np.array([[1.0, 2.0]])), [[0.5, 1.0]])
    dyn = DynamicsSpec(d=2, k=2, sigma=np.diag([2.0, 4.0]), beta_mode="generic",
                       drift=lambda t, x, a, mu, p: np.ones_like(x))
    assert np.allclose(beta_eval(dyn, 0.0, np.zeros((1, 2)), np.zeros((1, 2))), [[0.5, 0.25]])


def test_singular_volatility():
    dyn = DynamicsSpec(d=2, k=2, sigma=np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularVolatilityError):
        beta_eval(dyn, 0.0, np.zeros((1, 2)), np.zeros((1, 2)))
    s = _scenario(domain=DomainSpec.full_space(2), dynamics=dyn, controls=ControlSpace.full_space(2),
                  initial_law=InitialLaw("point", 0.0))
    assert "sigma invertible violated" in validate_scenario(s)


def test_control_space_projection():
    box = ControlSpace.box(-1.0, 1.0)
    assert box.project(np.array([[3.0]]))[0, 0] == 1.0
    ball = ControlSpace.ball(2.0, 2)
    a = ball.project(np.array([[3.0, 4.0]]))
    assert np.allclose(a, [[1.2, 1.6]])
    assert "0 in A violated" in ControlSpace.box(1.0, 2.0).diagnostics()


def test_domain_contains():
    assert DomainSpec.half_line(0.0).contains(np.array([[0.5], [-0.1], [0.0]])).tolist() == [True, False, False]
    ball = DomainSpec.ball([0.0, 0.0], 1.0)
    assert ball.contains(np.array([[0.5, 0.5], [1.0, 0.1]])).tolist() == [True, False]


def test_lq_scenario_valid():
    s = _scenario(domain=DomainSpec.full_space(1), cost=lq_terminal(), initial_law=InitialLaw("normal", 0.0, 1.0))
    assert validate_scenario(s) == []
