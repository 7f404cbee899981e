"""Built-in costs with linear derivatives, p-convexity checks and derivative validation."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import rng
from .measures import SignedMeasureRepr, WeightedSample, fw_norm_sq, fw_potential
from .model import CostSpec, quadratic_control_cost


class AbsoluteContinuityError(ValueError):
    pass


def _ones_main(v):
    return np.asarray(v, float)[None, :]


# --- terminal functionals ---------------------------------------------------

def variance_terminal(coef=1.0) -> CostSpec:
    """g = -2 coef Var(mu), so E[1{T<tau} g] = -2 coef p Var."""

    def g(x, mu, p):
        return np.full(len(x), -2.0 * coef * mu.variance())

    def dm_g(x, mu, p, y):
        r = np.sum((np.atleast_2d(y) - mu.mean()) ** 2, axis=1)
        return _ones_main(-2.0 * coef * (r - mu.variance()))

    def dp_g(x, mu, p):
        return np.zeros(len(x))

    return quadratic_control_cost(g=g, dm_g=dm_g, dp_g=dp_g, name="variance_terminal")


def mean_field_lq_terminal(q=1.0) -> CostSpec:
    """g = (q/2)|x - mean(mu)|^2."""

    def g(x, mu, p):
        return 0.5 * q * np.sum((x - mu.mean()) ** 2, axis=1)

    def dm_g(x, mu, p, y):
        m = mu.mean()
        return -q * (np.atleast_2d(x) - m) @ (np.atleast_2d(y) - m).T

    def dp_g(x, mu, p):
        return np.zeros(len(x))

    return quadratic_control_cost(g=g, dm_g=dm_g, dp_g=dp_g, name="mean_field_lq")


def lq_terminal(q=1.0) -> CostSpec:
    """g = (q/2)|x|^2, no measure dependence."""
    return quadratic_control_cost(
        g=lambda x, mu, p: 0.5 * q * np.sum(x * x, axis=1),
        dm_g=lambda x, mu, p, y: np.zeros((1, len(y))),
        dp_g=lambda x, mu, p: np.zeros(len(x)),
        name="lq",
    )


def concave_mean_square(coef=1.0) -> CostSpec:
    """g = -coef |mean(mu)|^2; not p-convex (negative perspective of a square)."""

    def g(x, mu, p):
        return np.full(len(x), -coef * float(np.sum(mu.mean() ** 2)))

    def dm_g(x, mu, p, y):
        m = mu.mean()
        return _ones_main(-2.0 * coef * (np.atleast_2d(y) - m) @ m)

    return quadratic_control_cost(g=g, dm_g=dm_g, dp_g=lambda x, mu, p: np.zeros(len(x)),
                                  name="concave_mean_square")


def state_only_terminal(h) -> CostSpec:
    """g = h(x), linear in the sub-probability measure."""
    return quadratic_control_cost(
        g=lambda x, mu, p: h(x),
        dm_g=lambda x, mu, p, y: np.zeros((1, len(y))),
        dp_g=lambda x, mu, p: np.zeros(len(x)),
        name="state_only",
    )


@dataclass(frozen=True)
class FWTarget:
    p_hat: float
    mu_hat: WeightedSample
    s: float = 1.0
    l: float = 1.0

    def zeta(self, mu, p):
        return SignedMeasureRepr.difference(mu, self.mu_hat, p, self.p_hat)

    def gap_sq(self, mu, p):
        return fw_norm_sq(self.zeta(mu, p), self.s)


def fw_target(p_hat, mu_hat: WeightedSample, s=1.0, l=1.0, base: CostSpec | None = None) -> CostSpec:
    """g = (l / 2p) ||p mu - p_hat mu_hat||^2_{-s}, so E[1{T<tau} g] is the FW penalty."""
    tgt = FWTarget(float(p_hat), mu_hat, float(s), float(l))

    def g(x, mu, p):
        return np.full(len(x), 0.5 * l / p * tgt.gap_sq(mu, p))

    def dm_g(x, mu, p, y):
        z = tgt.zeta(mu, p)
        pot_y = fw_potential(z, np.atleast_2d(y), s)
        pot_mu = mu.weights @ fw_potential(z, mu.points, s)
        return _ones_main(l * (pot_y - pot_mu))

    def dp_g(x, mu, p):
        z = tgt.zeta(mu, p)
        pot_mu = mu.weights @ fw_potential(z, mu.points, s)
        return np.full(len(x), -0.5 * l / p**2 * tgt.gap_sq(mu, p) + l / p * pot_mu)

    base = base or quadratic_control_cost()
    return replace(base, g=g, dm_g=dm_g, dp_g=dp_g, name="fw_target", meta={"target": tgt})


# f-divergence generators: (F, F')
def _neg_log(x):
    with np.errstate(divide="ignore"):
        return -np.log(x) + x - 1.0


def _neg_log_d(x):
    with np.errstate(divide="ignore"):
        return 1.0 - 1.0 / x


def _xlogx(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0) - x + 1.0


def _xlogx_d(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


F_CHOICES = {
    "neg_log": (_neg_log, _neg_log_d),
    "xlogx": (_xlogx, _xlogx_d),
    "half_abs": (lambda x: 0.5 * np.abs(x - 1.0), lambda x: 0.5 * np.sign(x - 1.0)),
    "lecam_F": (lambda x: (1.0 - x) ** 2 / (2.0 * x + 2.0),
                lambda x: (x - 1.0) * (x + 3.0) / (2.0 * (x + 1.0) ** 2)),
}


@dataclass(frozen=True)
class CellMap:
    """Nearest-atom (Voronoi) assignment of points to the atoms of a reference measure."""

    nu: WeightedSample
    tree: cKDTree = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.tree is None:
            object.__setattr__(self, "tree", cKDTree(self.nu.points))

    def __call__(self, x):
        return self.tree.query(np.atleast_2d(x))[1]

    def masses(self, mu: WeightedSample):
        return np.bincount(self(mu.points), weights=mu.weights, minlength=self.nu.size)


def f_divergence(F: str, nu: WeightedSample, base: CostSpec | None = None) -> CostSpec:
    """g = (1/p) sum_b nu_b F(p mu_b / nu_b), mu_b the mu-mass of the cell of atom b.

    Then p * g is the F-divergence of the sub-probability p mu from nu.
    """
    if F not in F_CHOICES:
        raise ValueError(f"unknown F {F!r}; choose from {sorted(F_CHOICES)}")
    Fn, dF = F_CHOICES[F]
    cells = CellMap(nu)
    nub = nu.weights

    def density(mu, p):
        mb = cells.masses(mu)
        if np.any((nub <= 0) & (mb > 0)):
            raise AbsoluteContinuityError("mu charges a cell of zero reference mass")
        with np.errstate(divide="ignore", invalid="ignore"):
            return mb, np.where(nub > 0, p * mb / np.where(nub > 0, nub, 1.0), 0.0)

    def checked(vals, what):
        if not np.all(np.isfinite(vals)):
            raise AbsoluteContinuityError(f"{F}: {what} undefined where the density vanishes")
        return vals

    def value(mu, p):
        mb, r = density(mu, p)
        return float(np.sum(nub * checked(Fn(r), "F"))) / p

    def g(x, mu, p):
        return np.full(len(x), value(mu, p))

    def dm_g(x, mu, p, y):
        mb, r = density(mu, p)
        d = checked(dF(r), "F'")
        return _ones_main(d[cells(y)] - mb @ d)

    def dp_g(x, mu, p):
        mb, r = density(mu, p)
        d = checked(dF(r), "F'")
        val = -np.sum(nub * checked(Fn(r), "F")) / p**2 + (mb @ d) / p
        return np.full(len(x), val)

    def kinks(mu, mu2, p):
        """lam in (0, 1) where p mu_lam / nu crosses 1 in some cell (half_abs only)."""
        if F != "half_abs":
            return np.array([])
        m1, m2 = cells.masses(mu), cells.masses(mu2)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (nub / p - m1) / (m2 - m1)
        return np.sort(lam[np.isfinite(lam) & (lam > 0) & (lam < 1)])

    base = base or quadratic_control_cost()
    return replace(base, g=g, dm_g=dm_g, dp_g=dp_g, name=f"f_divergence_{F}",
                   meta={"nu": nu, "F": F, "cells": cells, "kinks": kinks})


# --- conditional exit -------------------------------------------------------

@dataclass(frozen=True)
class MeasureFunctional:
    """Phi(mu) with centered linear derivative dm(mu, y)."""

    value: object = None
    dm: object = None

    @classmethod
    def zero(cls):
        return cls(lambda mu: 0.0, lambda mu, y: np.zeros(len(np.atleast_2d(y))))

    @classmethod
    def variance(cls, coef=1.0):
        return cls(lambda mu: coef * mu.variance(),
                   lambda mu, y: coef * (np.sum((np.atleast_2d(y) - mu.mean()) ** 2, axis=1) - mu.variance()))


def conditional_exit(eps=0.1, Phi: MeasureFunctional | None = None, Psi: MeasureFunctional | None = None,
                     L_state=None, coef=1.0) -> CostSpec:
    """Conditional-exit cost.

    Per unit time E[L | t < tau] + Phi(mu_t), at the end Psi(mu_T) - eps log p_T,
    with L = (coef/2)|a|^2 + L_state(x). Realized as f = (L + Phi)/p, g = (Psi - eps log p)/p.
    """
    Phi = Phi or MeasureFunctional.zero()
    Psi = Psi or MeasureFunctional.zero()
    Ls = L_state or (lambda t, x: np.zeros(len(x)))

    def f2(t, x, mu, p):
        return (Ls(t, x) + Phi.value(mu)) / p

    def dm_f2(t, x, mu, p, y):
        return _ones_main(Phi.dm(mu, y) / p)

    def dp_f2(t, x, mu, p):
        return -(Ls(t, x) + Phi.value(mu)) / p**2

    def g(x, mu, p):
        return np.full(len(x), (Psi.value(mu) - eps * np.log(p)) / p)

    def dm_g(x, mu, p, y):
        return _ones_main(Psi.dm(mu, y) / p)

    def dp_g(x, mu, p):
        v = Psi.value(mu) - eps * np.log(p)
        return np.full(len(x), -v / p**2 - eps / p**2)

    return quadratic_control_cost(
        coef, f1_weight=lambda p: 1.0 / p, f1_weight_p=lambda p: -1.0 / p**2,
        f2=f2, dm_f2=dm_f2, dp_f2=dp_f2, g=g, dm_g=dm_g, dp_g=dp_g,
        name="conditional_exit", meta={"eps": eps, "Phi": Phi, "Psi": Psi, "L_state": Ls, "coef": coef},
    )


def conditional_exit_direct(ens, flow, cost: CostSpec) -> float:
    """The same cost evaluated as sum_k (E[L | alive] + Phi(mu_k)) dt + Psi(mu_T) - eps log p_T."""
    meta = cost.meta
    coef, Ls, Phi, Psi, eps = meta["coef"], meta["L_state"], meta["Phi"], meta["Psi"], meta["eps"]
    total = 0.0
    for k in range(ens.n_steps):
        mu = flow.laws[k]
        al = ens.alive_at(k)
        t = ens.times[k]
        L = 0.5 * coef * np.sum(ens.actions[al, k] ** 2, axis=1) + Ls(t, ens.paths[al, k])
        total += (mu.expect(L) + Phi.value(mu)) * ens.dt
    return total + Psi.value(flow.laws[-1]) - eps * np.log(flow.survival[-1])


# --- lattice relative entropy ----------------------------------------------

def binary_kl_control(dt, **kw) -> CostSpec:
    """Per-unit-time relative entropy of a +-sqrt(dt) step with drift a.

    The step law is P(up) = (1 + a h)/2, h = sqrt(dt); the cost is
    KL(step | fair coin)/dt, strictly convex with modulus >= 1.
    """
    h = np.sqrt(dt)

    def f1(t, x, a):
        u = np.clip(np.sum(a, axis=-1) * h, -1 + 1e-15, 1 - 1e-15)
        return 0.5 * ((1 + u) * np.log1p(u) + (1 - u) * np.log1p(-u)) / dt

    def f1_a(t, x, a):
        u = np.clip(a * h, -1 + 1e-15, 1 - 1e-15)
        return np.arctanh(u) / h

    return CostSpec(f1=f1, f1_a=f1_a, m=1.0, argmin_linear=lambda c: -np.tanh(c * h) / h,
                    name="binary_kl", **kw)


# --- evaluation -------------------------------------------------------------

def eval_cost_terms(c: CostSpec, t, x, a, mu, p, terminal=False, y=None) -> dict:
    """All cost terms at (t, x, a, mu, p); dm terms evaluated at the extra points ``y`` (default mu's atoms)."""
    x = np.atleast_2d(x)
    y = mu.points if y is None else np.atleast_2d(y)
    out = {}
    if terminal:
        out["g"] = c.g(x, mu, p)
        out["dm_g"] = np.broadcast_to(c.dm_g(x, mu, p, y), (len(x), len(y)))
        out["dp_g"] = c.dp_g(x, mu, p)
        return out
    a = np.atleast_2d(a)
    out["f1"] = c.f1(t, x, a)
    out["f1_a"] = c.f1_a(t, x, a)
    out["f2"] = c.f2(t, x, mu, p)
    out["dm_f2"] = np.broadcast_to(c.dm_f2(t, x, mu, p, y), (len(x), len(y)))
    out["dp_f2"] = c.dp_f2(t, x, mu, p)
    return out


# --- checks -----------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    violations: np.ndarray
    detail: dict = field(default_factory=dict)

    @property
    def max_violation(self):
        return float(np.max(self.violations)) if self.violations.size else 0.0

    def summary(self):
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} (max violation {self.max_violation:.3e})"

    def to_csv(self, header=""):
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("trial,violation\n")
        for i, v in enumerate(self.violations):
            buf.write(f"{i},{v:.17g}\n")
        return buf.getvalue()


def default_atoms(n=32, d=1, seed=0):
    gen = rng.generator(seed, "atoms")
    return np.sort(gen.uniform(-1.5, 2.5, (n, d)), axis=0)


def _phi_total(c, mu, p, t=None):
    """Phi(mu, p) = p * int phi(x, mu, p) mu(dx) for the terminal part of ``c``."""
    return p * mu.expect(c.g(mu.points, mu, p))


def _random_tuple(gen, atoms, p_range=(0.2, 1.0), floor=0.3):
    n = len(atoms)
    # a uniform floor keeps densities interior so divergences stay smooth
    w1 = (1 - floor) * gen.dirichlet(np.full(n, 2.0)) + floor / n
    w2 = (1 - floor) * gen.dirichlet(np.full(n, 2.0)) + floor / n
    p1, p2 = gen.uniform(*p_range, 2)
    return WeightedSample(atoms, w1), p1, WeightedSample(atoms, w2), p2


def _mix(mu, p, mu2, p2, lam):
    pl = lam * p2 + (1 - lam) * p
    w = (lam * p2 * mu2.weights + (1 - lam) * p * mu.weights) / pl
    return WeightedSample(mu.points, w / w.sum()), pl


def check_p_convexity(c: CostSpec, trials=500, seed=0, atoms=None, name=None) -> CheckReport:
    """Max violation of Phi(mix) <= lam Phi(mu', p') + (1 - lam) Phi(mu, p) over random tuples."""
    atoms = default_atoms(seed=seed) if atoms is None else atoms
    gen = rng.generator(seed, "pconvexity")
    viol = np.empty(trials)
    for i in range(trials):
        mu, p, mu2, p2 = _random_tuple(gen, atoms)
        lam = gen.uniform(0.05, 0.95)
        mix, pl = _mix(mu, p, mu2, p2, lam)
        a, b, m = _phi_total(c, mu, p), _phi_total(c, mu2, p2), _phi_total(c, mix, pl)
        rhs = lam * b + (1 - lam) * a
        viol[i] = (m - rhs) / (1.0 + abs(a) + abs(b) + abs(m))
    return CheckReport(name or f"p_convexity[{c.name}]", bool(viol.max() <= 1e-10), viol)


def pcnv_integrand(c: CostSpec, mu, p, y):
    """phi(y, mu, p) + int dm(x~, mu, p, y) mu(dx~) + p int phi_p dmu."""
    y = np.atleast_2d(y)
    phi = c.g(y, mu, p)
    dm = np.asarray(c.dm_g(mu.points, mu, p, y))
    avg = dm[0] if dm.shape[0] == 1 else mu.weights @ dm
    return phi + avg + p * mu.expect(c.dp_g(mu.points, mu, p))


def check_pcnv_differential(c: CostSpec, trials=500, seed=0, atoms=None, secant_lam=1e-3, name=None) -> CheckReport:
    """Differential form: int integrand d(p' mu' - p mu) <= Phi(mu', p') - Phi(mu, p).

    Also checks that the secant (Phi(mix_lam) - Phi(mu, p))/lam at lam = 1e-3
    matches the integrand pairing within relative 1e-2.
    """
    atoms = default_atoms(seed=seed) if atoms is None else atoms
    gen = rng.generator(seed, "pcnv_differential")
    viol = np.empty(trials)
    sec_err = np.empty(trials)
    skipped = 0
    for i in range(trials):
        mu, p, mu2, p2 = _random_tuple(gen, atoms)
        integ = pcnv_integrand(c, mu, p, atoms)
        pairing = integ @ (p2 * mu2.weights - p * mu.weights)
        a, b = _phi_total(c, mu, p), _phi_total(c, mu2, p2)
        viol[i] = (pairing - (b - a)) / (1.0 + abs(a) + abs(b))
        mix, pl = _mix(mu, p, mu2, p2, secant_lam)
        secant = (_phi_total(c, mix, pl) - a) / secant_lam
        direction = p2 * mu2.weights - p * mu.weights
        scale = max(abs(pairing), float(np.abs(integ) @ np.abs(direction)), abs(b - a))
        sec_err[i] = abs(secant - pairing) / max(scale, 1e-12)
        # the secant says nothing about the derivative across a kink
        if _crosses_kink(c, mu, p, mu2, p2, secant_lam):
            sec_err[i] = 0.0
            skipped += 1
    ok = viol.max() <= 1e-8 and sec_err.max() <= 1e-2
    return CheckReport(name or f"pcnv_differential[{c.name}]", bool(ok), viol,
                       {"max_secant_rel_err": float(sec_err.max()), "secant_skipped_at_kinks": skipped})


def _crosses_kink(c, mu, p, mu2, p2, lam):
    """Whether some cell density p mu_b / nu_b crosses a kink of F on the first lam of the segment."""
    if c.meta.get("F") != "half_abs":
        return False
    cells, nub = c.meta["cells"], c.meta["nu"].weights
    r0 = p * cells.masses(mu) / nub
    mix, pl = _mix(mu, p, mu2, p2, lam)
    r1 = pl * cells.masses(mix) / nub
    return bool(np.any((r0 - 1.0) * (r1 - 1.0) <= 0))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _gl16(fun, a, b):
    half = 0.5 * (b - a)
    return sum(w * fun(a + half * (z + 1.0)) for z, w in zip(_GL_NODES, _GL_WEIGHTS)) * half


def _gauss_legendre(fun, a, b, tol=1e-13, depth=40):
    """Composite 16-point Gauss-Legendre with bisection where the halves disagree.

    Exact to rounding on smooth pieces; bisection isolates kinks (e.g. |x - 1|).
    """
    whole = _gl16(fun, a, b)
    stack = [(a, b, whole, 0)]
    total = 0.0
    while stack:
        lo, hi, val, lev = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl16(fun, lo, mid), _gl16(fun, mid, hi)
        if lev >= depth or np.max(np.abs(left + right - val)) <= tol * (1.0 + np.max(np.abs(whole))):
            total = total + left + right
        else:
            stack += [(lo, mid, left, lev + 1), (mid, hi, right, lev + 1)]
    return total


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)


def validate_derivatives(c: CostSpec, trials=20, seed=0, atoms=None, tol=1e-6) -> CheckReport:
    """Finite-difference checks of f1_a, the dm terms (Gauss-Legendre in lam) and dp terms."""
    atoms = default_atoms(seed=seed) if atoms is None else atoms
    d = atoms.shape[1]
    gen = rng.generator(seed, "derivatives")
    errs = {"f1_a": [], "dm_g": [], "dp_g": [], "dm_f2": [], "dp_f2": []}
    t = 0.3
    for _ in range(trials):
        mu, p, mu2, _ = _random_tuple(gen, atoms, (0.2, 0.9))
        x = atoms[gen.integers(0, len(atoms), 3)]
        a = 0.5 * gen.standard_normal((3, d))
        h = 1e-5
        fd = np.stack([(c.f1(t, x, a + h * e) - c.f1(t, x, a - h * e)) / (2 * h) for e in np.eye(a.shape[1])], axis=1)
        errs["f1_a"].append(_rel(c.f1_a(t, x, a), fd).max())
        dmu = mu2.weights - mu.weights
        for key, fun, dm, dp in (("g", lambda m, q: c.g(x, m, q), lambda m, q: c.dm_g(x, m, q, atoms),
                                  lambda m, q: c.dp_g(x, m, q)),
                                 ("f2", lambda m, q: c.f2(t, x, m, q), lambda m, q: c.dm_f2(t, x, m, q, atoms),
                                  lambda m, q: c.dp_f2(t, x, m, q))):
            diff = fun(mu2, p) - fun(mu, p)

            def along(lj, dm=dm):
                ml = WeightedSample(atoms, (1 - lj) * mu.weights + lj * mu2.weights, normalized=False)
                return np.broadcast_to(dm(ml, p), (len(x), len(atoms))) @ dmu

            cuts = c.meta.get("kinks", lambda *a: np.array([]))(mu, mu2, p) if key == "g" else np.array([])
            edges = np.concatenate([[0.0], cuts, [1.0]])
            integral = sum(_gauss_legendre(along, lo, hi) for lo, hi in zip(edges[:-1], edges[1:]))
            scale = np.abs(diff).max() + 1e-12
            errs["dm_" + key].append(float(np.max(np.abs(diff - integral)) / max(scale, 1e-10)) if scale > 1e-10 else 0.0)
            hp = 1e-5 * p
            fdp = (fun(mu, p + hp) - fun(mu, p - hp)) / (2 * hp)
            ex = dp(mu, p)
            sc = max(np.abs(ex).max(), np.abs(fun(mu, p)).max(), 1e-10)
            errs["dp_" + key].append(float(np.max(np.abs(ex - fdp)) / sc))
    worst = {k: float(np.max(v)) for k, v in errs.items()}
    passed = all(v < tol for v in worst.values())
    return CheckReport(f"derivatives[{c.name}]", passed, np.array(list(worst.values())), worst)
