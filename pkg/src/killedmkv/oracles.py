"""Closed-form and brute-force references: Riccati LQ, killed-chain Sinkhorn, survival, FW identity."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .model import DomainSpec


class InfeasibleTargetError(ValueError):
    pass


# --- scalar LQ --------------------------------------------------------------

@dataclass(frozen=True)
class RiccatiLQ:
    """V(t, x) = P_t x^2 / 2 + c_t for dX = a dt + dW, cost int a^2/2 + q X_T^2 / 2."""

    q: float
    T: float

    def P(self, t):
        t = np.asarray(t, float)
        return self.q / (1.0 + self.q * (self.T - t))

    def c(self, t):
        return 0.5 * np.log1p(self.q * (self.T - np.asarray(t, float)))

    def value(self, t, x):
        return 0.5 * self.P(t) * np.asarray(x, float) ** 2 + self.c(t)

    def feedback(self, t, x):
        return -self.P(t) * np.asarray(x, float)

    def Z(self, t, x, sigma=1.0):
        return self.P(t) * np.asarray(x, float) * sigma

    def expected_cost(self, mean0=0.0, var0=0.0):
        """J at the optimum for X_0 with the given first two moments."""
        return 0.5 * float(self.P(0.0)) * (var0 + mean0**2) + float(self.c(0.0))

    def hjb_residual(self, t, x, h=1e-4):
        """dV/dt + V_xx / 2 - V_x^2 / 2 by central differences."""
        v = self.value
        vt = (v(t + h, x) - v(t - h, x)) / (2 * h)
        vx = (v(t, x + h) - v(t, x - h)) / (2 * h)
        vxx = (v(t, x + h) - 2 * v(t, x) + v(t, x - h)) / h**2
        return vt + 0.5 * vxx - 0.5 * vx**2


def riccati_lq(q=1.0, T=1.0) -> RiccatiLQ:
    """P_t = q / (1 + q (T - t)) solving P' = P^2, P_T = q."""
    if q < 0:
        raise ValueError("q must be nonnegative")
    return RiccatiLQ(float(q), float(T))


# --- survival and FW identity -----------------------------------------------

def halfline_survival(x0, sigma=1.0, t=1.0) -> float:
    """P(min_{s<=t} x0 + sigma W_s > 0) = 2 Phi(x0 / (sigma sqrt t)) - 1."""
    if x0 <= 0:
        return 0.0
    if t <= 0:
        return 1.0
    return math.erf(x0 / (sigma * math.sqrt(2.0 * t)))


def fw_dirac_identity(u) -> float:
    """(1/pi) int_R (1 - cos u xi) / (1 + xi^2) dxi by Fourier-weighted adaptive quadrature."""
    u = abs(float(u))
    if u == 0.0:
        return 0.0
    kern = lambda xi: 1.0 / (1.0 + xi * xi)
    # finite head with the cosine weight, Fourier-integral tail beyond it
    cut = 50.0
    head, _ = integrate.quad(kern, 0.0, cut, weight="cos", wvar=u, epsabs=1e-14, epsrel=1e-13, limit=500)
    tail, _ = integrate.quad(kern, cut, np.inf, weight="cos", wvar=u, epsabs=1e-12)
    osc = head + tail
    return (2.0 / np.pi) * (np.pi / 2.0 - osc)


# --- killed Markov chains ---------------------------------------------------

@dataclass(frozen=True)
class KilledChain:
    """Time-homogeneous chain on ``states`` with an absorbing cemetery (last column of ``kernel``)."""

    states: np.ndarray
    kernel: np.ndarray
    n_steps: int

    @property
    def n_live(self):
        return len(self.states)

    def reference_joint(self, nu0) -> np.ndarray:
        """R[i, j] = nu0_i P(X_n = j | X_0 = i), j ranging over live states then the cemetery."""
        n = self.n_live
        full = np.zeros((n + 1, n + 1))
        full[:n] = self.kernel
        full[n, n] = 1.0
        step = np.linalg.matrix_power(full, self.n_steps)
        return np.asarray(nu0, float)[:, None] * step[:n]


def binomial_tree(x0, sigma, T, depth, domain: DomainSpec) -> tuple[KilledChain, np.ndarray]:
    """+- sigma sqrt(dt) chain started at x0, absorbed at the first lattice point outside D.

    Returns the chain and the initial law (a point mass at x0).
    """
    if depth > 12:
        raise ValueError("tree depth is limited to 12")
    h = sigma * math.sqrt(T / depth)
    offs = np.arange(-depth, depth + 1)
    pts = x0 + h * offs
    inside = domain.contains(pts[:, None])
    states = pts[inside]
    n = len(states)
    idx = {int(o): i for i, o in enumerate(offs[inside])}
    live_offs = offs[inside]
    K = np.zeros((n, n + 1))
    for i, o in enumerate(live_offs):
        for nb in (o - 1, o + 1):
            j = idx.get(int(nb))
            if j is None:
                K[i, n] += 0.5
            else:
                K[i, j] += 0.5
    nu0 = np.zeros(n)
    nu0[idx[0]] = 1.0
    return KilledChain(states, K, depth), nu0


def _kl(pi, ref):
    m = pi > 0
    return float(np.sum(pi[m] * np.log(pi[m] / ref[m])))


def sinkhorn_cemetery(chain: KilledChain, nu0, p_hat, mu_hat, tol=1e-12, max_iters=100_000):
    """Minimize KL(pi | R) over couplings of (start, end or cemetery) with the given marginals.

    Returns (value, coupling). ``mu_hat`` is a vector over the live states.
    """
    R = chain.reference_joint(nu0)
    nu0 = np.asarray(nu0, float)
    target = np.append(p_hat * np.asarray(mu_hat, float), 1.0 - p_hat)
    col = R.sum(axis=0)
    if np.any((target > 0) & (col <= 0)):
        raise InfeasibleTargetError("target charges a state with zero reference mass")
    rows = nu0 > 0
    a = np.where(rows, 1.0, 0.0)
    b = np.where(target > 0, 1.0, 0.0)
    for _ in range(max_iters):
        rb = R @ b
        a = np.where(rows, nu0 / np.where(rb > 0, rb, 1.0), 0.0)
        ra = a @ R
        b = np.where(target > 0, target / np.where(ra > 0, ra, 1.0), 0.0)
        pi = a[:, None] * R * b[None, :]
        err = np.abs(pi.sum(axis=1) - nu0).sum() + np.abs(pi.sum(axis=0) - target).sum()
        if err < tol:
            break
    return _kl(pi, R), pi


def brute_force_coupling_kl(R, nu0, target, grid=41, rounds=12):
    """KL minimum over couplings of a 2 x 3 reference with fixed marginals by iterated grid refinement."""
    R = np.asarray(R, float)
    if R.shape != (2, 3):
        raise ValueError("brute force supports a 2 x 3 reference only")
    nu0, target = np.asarray(nu0, float), np.asarray(target, float)

    def coupling(u, v):
        # free entries pi[0, 0] = u, pi[0, 1] = v; the rest follow from the marginals
        pi = np.empty((2, 3))
        pi[0, 0], pi[0, 1] = u, v
        pi[0, 2] = nu0[0] - u - v
        pi[1] = target - pi[0]
        return pi

    def obj(u, v):
        pi = coupling(u, v)
        if np.any(pi < 0):
            return np.inf
        return _kl(pi, R)

    lo = np.array([0.0, 0.0])
    hi = np.array([min(nu0[0], target[0]), min(nu0[0], target[1])])
    best = None
    for _ in range(rounds):
        us = np.linspace(lo[0], hi[0], grid)
        vs = np.linspace(lo[1], hi[1], grid)
        vals = np.array([[obj(u, v) for v in vs] for u in us])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        best = (vals[i, j], coupling(us[i], vs[j]))
        du, dv = (hi - lo) / (grid - 1)
        lo = np.array([max(us[i] - 2 * du, 0.0), max(vs[j] - 2 * dv, 0.0)])
        hi = np.array([us[i] + 2 * du, vs[j] + 2 * dv])
    return best
