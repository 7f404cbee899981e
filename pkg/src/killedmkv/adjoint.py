"""Hamiltonian, its minimizer over the action space, and the least-squares Monte Carlo adjoint solver."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .basis import Basis, r_squared, weighted_ridge
from .dynamics import ExtinctionError, ParticleEnsemble
from .measures import MeasureFlow, WeightedSample
from .model import ControlSpace, CostSpec, DynamicsSpec, beta_eval


class HamiltonianConvergenceError(RuntimeError):
    pass


def beta_jacobian(dyn: DynamicsSpec, t, x, a, mu=None, p=1.0, h=1e-6) -> np.ndarray:
    """d beta / d a, shape (n, d, k)."""
    x = np.atleast_2d(x)
    n = len(x)
    if dyn.beta_mode == "affine":
        lin = dyn.beta_linear(t, x)
        return np.broadcast_to(lin, (n, dyn.d, dyn.k))
    a = np.atleast_2d(a)
    cols = []
    for e in np.eye(dyn.k):
        cols.append((beta_eval(dyn, t, x, a + h * e, mu, p) - beta_eval(dyn, t, x, a - h * e, mu, p)) / (2 * h))
    return np.stack(cols, axis=2)


def hamiltonian(t, x, a, mu, p, z, dyn: DynamicsSpec, cost: CostSpec) -> np.ndarray:
    """h = w(p) f1 + f2 + beta . z per particle."""
    x, a, z = np.atleast_2d(x), np.atleast_2d(a), np.atleast_2d(z)
    beta = beta_eval(dyn, t, x, a, mu, p)
    f2 = cost.f2(t, x, mu, p) if mu is not None else 0.0
    return cost.weight(p) * cost.f1(t, x, a) + f2 + np.sum(beta * z, axis=1)


def hamiltonian_a(t, x, a, mu, p, z, dyn, cost) -> np.ndarray:
    """Gradient of the Hamiltonian in the action, shape (n, k)."""
    jac = beta_jacobian(dyn, t, x, a, mu, p)
    return cost.weight(p) * cost.f1_a(t, x, np.atleast_2d(a)) + np.einsum("ndk,nd->nk", jac, np.atleast_2d(z))


def minimize_hamiltonian(t, x, mu, p, z, dyn: DynamicsSpec, cost: CostSpec, space: ControlSpace,
                         a0=None, max_steps=10_000, tol=1e-8) -> np.ndarray:
    """argmin over A of w(p) f1(t, x, a) + z . beta(t, x, a, mu, p), per particle.

    Closed form for affine beta with f1 = (c/2)|a|^2 (or a supplied
    ``argmin_linear``), followed by projection onto A; otherwise projected
    gradient descent with Armijo backtracking.
    """
    x, z = np.atleast_2d(x), np.atleast_2d(z)
    n = len(x)
    w = cost.weight(p)
    if dyn.beta_mode == "affine" and (cost.f1_quad is not None or (cost.argmin_linear is not None and dyn.k == 1)):
        lin = dyn.beta_linear(t, x)
        c = (z @ lin if lin.ndim == 2 else np.einsum("nd,ndk->nk", z, lin)) / w
        a = -c / cost.f1_quad if cost.f1_quad is not None else cost.argmin_linear(c)
        return space.project(a)

    def obj(a):
        return w * cost.f1(t, x, a) + np.sum(beta_eval(dyn, t, x, a, mu, p) * z, axis=1)

    a = space.project(np.zeros((n, dyn.k)) if a0 is None else np.atleast_2d(a0))
    step = np.ones(n)
    grad = hamiltonian_a(t, x, a, mu, p, z, dyn, cost)
    for _ in range(max_steps):
        pg = a - space.project(a - grad)
        if np.max(np.linalg.norm(pg, axis=1)) < tol:
            return a
        f0 = obj(a)
        while True:
            trial = space.project(a - step[:, None] * grad)
            decrease = f0 - obj(trial)
            need = 1e-4 * np.sum(grad * (a - trial), axis=1)
            # below rounding resolution the value test is meaningless; trust the step
            resolvable = need > 1e-13 * (1.0 + np.abs(f0))
            bad = resolvable & (decrease < need)
            if not bad.any():
                break
            step = np.where(bad, 0.5 * step, step)
        g_new = hamiltonian_a(t, x, trial, mu, p, z, dyn, cost)
        ds, dg = trial - a, g_new - grad
        curv = np.sum(ds * dg, axis=1)
        # Barzilai-Borwein step for the next iteration
        step = np.where(curv > 1e-300, np.sum(ds * ds, axis=1) / np.maximum(curv, 1e-300), step * 2.0)
        step = np.clip(step, 1e-10, 1e10)
        a, grad = trial, g_new
    raise HamiltonianConvergenceError(f"projected gradient did not converge in {max_steps} steps")


@dataclass
class AdjointSolution:
    Y: np.ndarray
    Z: np.ndarray
    r2: np.ndarray
    cond: np.ndarray
    driver: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def summary_csv(self, times, weights=None, header=""):
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("step,time,mean_Y,var_Y,mean_abs_Z,r2\n")
        nt = self.Z.shape[1]
        for k in range(nt + 1):
            y = self.Y[:, k]
            zabs = np.linalg.norm(self.Z[:, k], axis=1).mean() if k < nt else np.nan
            r2 = self.r2[k] if k < nt else np.nan
            buf.write(f"{k},{times[k]:.10g},{y.mean():.17g},{y.var():.17g},{zabs:.17g},{r2:.17g}\n")
        return buf.getvalue()


def _main_sample(mu: WeightedSample, n_main, gen, exact):
    """Main-variable points for the tilde-expectation: all atoms, or n_main drawn in proportion to mu."""
    if exact or mu.size <= n_main:
        return mu.points, mu.weights, None
    idx = gen.choice(mu.size, size=n_main, replace=True, p=mu.weights)
    return mu.points[idx], np.full(n_main, 1.0 / n_main), idx


def _main_average(dm, w_main):
    dm = np.asarray(dm, float)
    if dm.shape[0] == 1:
        return dm[0]
    return w_main @ dm


def terminal_values(ens: ParticleEnsemble, flow: MeasureFlow, cost: CostSpec, n_main=256, exact=False, seed=0):
    """g + tilde-E[dm_g(X~, mu, p, x)] + E[1{T<tau} g_p] on survivors."""
    nt = ens.n_steps
    mu, p = flow.laws[nt], float(flow.survival[nt])
    sv = ens.survived
    x = ens.paths[sv, nt]
    gen = rng.generator(seed, f"adjoint/main/{nt}")
    xm, wm, _ = _main_sample(mu, n_main, gen, exact)
    val = cost.g(x, mu, p) + _main_average(cost.dm_g(xm, mu, p, x), wm)
    val = val + p * mu.expect(cost.dp_g(mu.points, mu, p))
    out = np.zeros(ens.n_particles)
    out[sv] = val
    return out


def solve_adjoint(ens: ParticleEnsemble, flow: MeasureFlow, dyn: DynamicsSpec, cost: CostSpec,
                  basis: Basis = Basis("poly", 2), n_main=256, exact_pairs=False, seed=0,
                  ridge=1e-8) -> AdjointSolution:
    """Backward recursion for (Y, Z) along a reweighted ensemble and its flow.

    Y_k = E^a[Y_{k+1} | X_k] + driver_k dt and
    Z_k = E^a[(Y_{k+1} - E^a[Y_{k+1} | X_k]) dW^a_k | X_k] / dt, both by
    E_{k+1}-weighted regression over particles alive at k. Y and Z vanish after exit.
    """
    if ens.actions is None:
        raise ValueError("ensemble has not been reweighted")
    n, nt, dt, d = ens.n_particles, ens.n_steps, ens.dt, ens.dim
    W = ens.weights
    Y = np.zeros((n, nt + 1))
    Z = np.zeros((n, nt, d))
    drivers = np.zeros((n, nt))
    r2 = np.full(nt, np.nan)
    conds = np.full(nt, np.nan)
    Y[:, nt] = terminal_values(ens, flow, cost, n_main, exact_pairs, seed)
    rademacher = ens.noise == "rademacher"
    for k in range(nt - 1, -1, -1):
        al = ens.alive_at(k)
        if not al.any():
            raise ExtinctionError(f"no particles alive at step {k}")
        t = ens.times[k]
        x = ens.paths[al, k]
        w1 = W[al, k + 1]
        fr = basis.frame(x, W[al, k])
        phi = fr.features(x)
        y1 = Y[al, k + 1]
        coef, cond = weighted_ridge(phi, y1, w1, ridge)
        yhat = phi @ coef
        conds[k] = cond
        r2[k] = r_squared(y1, yhat, w1)
        if rademacher:
            # reference-measure Z: exact for a two-point step given X_k
            zt = (y1 - yhat)[:, None] * ens.dW[al, k] / dt
            zc, _ = weighted_ridge(phi, zt, W[al, k], ridge)
        else:
            zt = (y1 - yhat)[:, None] * ens.dW_alpha(k)[al] / dt
            zc, _ = weighted_ridge(phi, zt, w1, ridge)
        z = phi @ zc
        Z[al, k] = z
        drv = _driver(ens, flow, dyn, cost, k, al, x, z, n_main, exact_pairs, seed)
        drivers[al, k] = drv
        Y[al, k] = yhat + drv * dt
    return AdjointSolution(Y, Z, r2, conds, drivers)


def _driver(ens, flow, dyn, cost, k, al, x, z, n_main, exact, seed):
    t = ens.times[k]
    mu, p = flow.laws[k], float(flow.survival[k])
    a = ens.actions[al, k]
    w = cost.weight(p)
    f1 = cost.f1(t, x, a)
    drv = w * f1 + cost.f2(t, x, mu, p)
    gen = rng.generator(seed, f"adjoint/main/{k}")
    xm, wm, idx = _main_sample(mu, n_main, gen, exact)
    drv = drv + _main_average(cost.dm_f2(t, xm, mu, p, x), wm)
    # mu's atoms are the alive particles at k in order; the main sample indexes them
    W = ens.weights
    ek = W[al, k]
    n = ens.n_particles
    fp = cost.weight_p(p) * f1 + cost.dp_f2(t, x, mu, p)
    if dyn.measure_dependent:
        if not dyn.constant_sigma:
            raise NotImplementedError("measure-dependent drift needs constant volatility")
        inv = dyn.sigma_inverse(t, x)
        zm = z if idx is None else z[idx]
        dmb = np.asarray(dyn.dm_b2(t, xm, mu, p, x))  # (M or 1, n, d)
        dmbeta = dmb @ inv.T
        if dmbeta.shape[0] == 1:
            drv = drv + dmbeta[0] @ (wm @ zm)
        else:
            drv = drv + np.einsum("m,mnd,md->n", wm, dmbeta, zm)
        bp = dyn.dp_b2(t, x, mu, p) @ inv.T
        fp = fp + np.sum(bp * z, axis=1)
    drv = drv + np.sum(ek * fp) / n
    return drv
