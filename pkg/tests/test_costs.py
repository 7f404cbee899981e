import numpy as np
import pytest

from killedmkv.costs import (AbsoluteContinuityError, MeasureFunctional, binary_kl_control, check_p_convexity,
                             check_pcnv_differential, concave_mean_square, conditional_exit, default_atoms,
                             f_divergence, fw_target, lq_terminal, mean_field_lq_terminal, validate_derivatives,
                             variance_terminal)
from killedmkv.measures import WeightedSample

ATOMS = default_atoms()
NU = WeightedSample(ATOMS, np.full(len(ATOMS), 1.0 / len(ATOMS)))
CONVEX = {
    "variance": variance_terminal(),
    "lq": lq_terminal(),
    "conditional_exit": conditional_exit(0.5),
    "fw_target": fw_target(0.6, WeightedSample(ATOMS[::4], np.full(8, 1 / 8))),
    **{f"f_{F}": f_divergence(F, NU) for F in ("neg_log", "xlogx", "half_abs", "lecam_F")},
}
# p Var(mu) = int x^2 dm - (int x dm)^2 / p is concave along mixtures of sub-probabilities
NOT_CONVEX = {
    "mean_field_lq": mean_field_lq_terminal(),
    "conditional_exit_var": conditional_exit(0.5, Psi=MeasureFunctional.variance()),
    "concave_mean_square": concave_mean_square(),
}


@pytest.mark.parametrize("name", sorted(CONVEX) + sorted(NOT_CONVEX))
def test_derivatives(name):
    rep = validate_derivatives({**CONVEX, **NOT_CONVEX}[name])
    assert rep.passed, rep.detail


@pytest.mark.parametrize("name", sorted(CONVEX))
def test_p_convexity(name):
    assert check_p_convexity(CONVEX[name], trials=200).passed


@pytest.mark.parametrize("name", sorted(CONVEX))
def test_p_convexity_differential(name):
    rep = check_pcnv_differential(CONVEX[name], trials=200)
    assert rep.passed, (rep.max_violation, rep.detail)


@pytest.mark.parametrize("name", sorted(NOT_CONVEX))
def test_not_p_convex(name):
    rep = check_p_convexity(NOT_CONVEX[name], trials=200)
    assert not rep.passed and rep.max_violation > 1e-4
    assert not check_pcnv_differential(NOT_CONVEX[name], trials=200).passed


def test_absolute_continuity():
    c = f_divergence("xlogx", WeightedSample(ATOMS, np.r_[0.0, np.full(len(ATOMS) - 1, 1 / (len(ATOMS) - 1))]))
    mu = WeightedSample(ATOMS[:1], np.ones(1))
    with pytest.raises(AbsoluteContinuityError):
        c.g(ATOMS[:1], mu, 0.5)


def test_binary_kl():
    dt = 0.1
    c = binary_kl_control(dt)
    a = np.linspace(-2, 2, 9)[:, None]
    x = np.zeros_like(a)
    u = a[:, 0] * np.sqrt(dt)
    pu = (1 + u) / 2
    kl = pu * np.log(2 * pu) + (1 - pu) * np.log(2 * (1 - pu))
    assert np.allclose(c.f1(0, x, a) * dt, kl)
    # modulus: f1 >= a^2 / 2
    assert np.all(c.f1(0, x, a) >= 0.5 * a[:, 0] ** 2 - 1e-12)
    cc = np.array([-0.7, 0.0, 1.3])
    amin = c.argmin_linear(cc)
    assert np.allclose(c.f1_a(0, np.zeros((3, 1)), amin[:, None])[:, 0], -cc)
