import numpy as np
import pytest

from killedmkv.basis import Basis, RegressionSingularError, monomial_exponents, r_squared, weighted_ridge


def test_monomials():
    assert len(monomial_exponents(1, 2)) == 3
    assert len(monomial_exponents(2, 2)) == 6


def test_quadratic_exact():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(500, 1))
    y = 1 + 2 * x[:, 0] - 0.5 * x[:, 0] ** 2
    fr = Basis("poly", 2).frame(x)
    phi = fr.features(x)
    coef, cond = weighted_ridge(phi, y, np.ones(len(x)), ridge=1e-14)
    assert np.allclose(phi @ coef, y, atol=1e-8)
    assert r_squared(y, phi @ coef, np.ones(len(x))) == pytest.approx(1.0)


def test_bins_one_hot():
    b = Basis("bins", edges=(0.0, 1.0))
    phi = b.frame(np.zeros((3, 1))).features(np.array([[-1.0], [0.5], [2.0]]))
    assert np.array_equal(phi, np.eye(3))


def test_singular_raises():
    phi = np.column_stack([np.ones(10), 1e-9 * np.arange(10)])
    with pytest.raises(RegressionSingularError):
        weighted_ridge(phi, np.ones(10), np.ones(10), ridge=0.0, max_cond=10.0, escalations=0)
