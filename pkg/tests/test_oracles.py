import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from killedmkv.model import DomainSpec
from killedmkv.oracles import (InfeasibleTargetError, binomial_tree, brute_force_coupling_kl, fw_dirac_identity,
                               halfline_survival, riccati_lq, sinkhorn_cemetery)


def test_riccati():
    r = riccati_lq(1.0, 1.0)
    assert float(r.P(0.0)) == pytest.approx(0.5)
    assert float(r.c(0.0)) == pytest.approx(0.5 * math.log(2))
    for t in (0.1, 0.5, 0.9):
        assert abs(r.hjb_residual(t, 0.7)) < 1e-5
    with pytest.raises(ValueError):
        riccati_lq(-1.0)


def test_survival():
    assert halfline_survival(1.0) == pytest.approx(0.6826894921370859, abs=1e-14)
    assert halfline_survival(-1.0) == 0.0


@pytest.mark.parametrize("u", [0.1, 0.5, 1.0, 2.0, 5.0])
def test_fw_identity(u):
    assert fw_dirac_identity(u) == pytest.approx(1 - math.exp(-u), abs=1e-9)


def test_tree_mass_conservation():
    chain, nu0 = binomial_tree(1.0, 1.0, 1.0, 12, DomainSpec.half_line(0.0))
    assert np.allclose(chain.kernel.sum(axis=1), 1.0)
    R = chain.reference_joint(nu0)
    assert R.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        binomial_tree(1.0, 1.0, 1.0, 13, DomainSpec.half_line(0.0))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=6, max_size=6), st.floats(0.2, 0.8), st.floats(0.2, 0.8),
       st.floats(0.2, 0.8))
def test_sinkhorn_matches_brute_force(r, a, t0, t1):
    R = np.array(r).reshape(2, 3)
    R /= R.sum()
    nu0 = np.array([a, 1 - a])
    target = np.array([t0 * t1, t0 * (1 - t1), 1 - t0])
    from killedmkv.oracles import KilledChain

    # wrap a one-step 2-state chain whose joint is the given R
    kernel = R / R.sum(axis=1, keepdims=True)
    chain = KilledChain(np.array([0.0, 1.0]), kernel, 1)
    v_sk, pi = sinkhorn_cemetery(chain, nu0, t0, target[:2] / t0)
    v_bf, _ = brute_force_coupling_kl(chain.reference_joint(nu0), nu0, target)
    assert v_sk <= v_bf + 1e-9
    assert v_sk == pytest.approx(v_bf, abs=1e-6)
    assert np.allclose(pi.sum(axis=1), nu0) and np.allclose(pi.sum(axis=0), target)


def test_infeasible_target():
    chain, nu0 = binomial_tree(1.0, 1.0, 1.0, 4, DomainSpec.half_line(0.0))
    mu = np.zeros(chain.n_live)
    # odd offsets are unreachable after an even number of steps
    reach = chain.reference_joint(nu0).sum(axis=0)[:-1]
    mu[np.argmin(reach)] = 1.0
    with pytest.raises(InfeasibleTargetError):
        sinkhorn_cemetery(chain, nu0, 0.5, mu)
