"""Problem description: domain, dynamics, action space, costs and scenario.

All evaluators are vectorized over particles at one grid time. States ``x`` have
shape (n, d), actions ``a`` shape (n, k), ``mu`` is a normalized
:class:`~killedmkv.measures.WeightedSample` and ``p`` a float in (0, 1].

Linear derivatives in the measure take a *main* point set ``x`` of shape (M, d)
and an additional point set ``y`` of shape (n, d) and return an (M, n) array
(or (M, n, d) for drifts). A leading axis of length 1 means the derivative
does not depend on the main point. Derivatives are centered in ``y``:
``sum_j mu_j dm(x, y_j) = 0`` for every ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .measures import WeightedSample
from . import rng as _rng


class SingularVolatilityError(ValueError):
    pass


class DomainError(ValueError):
    pass


# --- domain -----------------------------------------------------------------

@dataclass(frozen=True)
class DomainSpec:
    kind: str = "full_space"
    dim: int = 1
    threshold: float = 0.0
    lo: np.ndarray | float | None = None
    hi: np.ndarray | float | None = None
    center: np.ndarray | None = None
    radius: float = 1.0

    KINDS = ("full_space", "half_line", "interval", "box", "ball")

    @classmethod
    def full_space(cls, dim=1):
        return cls("full_space", dim)

    @classmethod
    def half_line(cls, threshold=0.0):
        return cls("half_line", 1, threshold=float(threshold))

    @classmethod
    def interval(cls, lo, hi):
        return cls("interval", 1, lo=float(lo), hi=float(hi))

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        return cls("box", lo.size, lo=lo, hi=hi)

    @classmethod
    def ball(cls, center, radius):
        c = np.atleast_1d(np.asarray(center, float))
        return cls("ball", c.size, center=c, radius=float(radius))

    def diagnostics(self) -> list[str]:
        out = []
        if self.kind not in self.KINDS:
            out.append(f"unknown domain kind {self.kind!r}")
        if self.dim < 1:
            out.append("dimension must be positive")
        if self.kind in ("interval", "box") and not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
            out.append("lo < hi violated")
        if self.kind == "ball" and not self.radius > 0:
            out.append("radius > 0 violated")
        if self.kind == "half_line" and self.dim != 1:
            out.append("half_line requires dimension 1")
        return out

    def contains(self, x) -> np.ndarray:
        """Membership of each row of ``x`` (open domain)."""
        x = np.atleast_2d(np.asarray(x, float))
        finite = np.all(np.isfinite(x), axis=1)
        if self.kind == "full_space":
            return finite
        if self.kind == "half_line":
            return finite & (x[:, 0] > self.threshold)
        if self.kind in ("interval", "box"):
            return finite & np.all((x > self.lo) & (x < self.hi), axis=1)
        if self.kind == "ball":
            return finite & (np.sum((x - self.center) ** 2, axis=1) < self.radius**2)
        raise DomainError(f"unknown domain kind {self.kind!r}")

    def boundaries_1d(self):
        """(lower, upper) barrier levels for the bridge correction, or None."""
        if self.kind == "half_line":
            return self.threshold, None
        if self.kind == "interval":
            return float(self.lo), float(self.hi)
        return None


# --- action space -----------------------------------------------------------

@dataclass(frozen=True)
class ControlSpace:
    kind: str = "full_space"
    k: int = 1
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    radius: float = np.inf

    @classmethod
    def full_space(cls, k=1):
        return cls("full_space", k)

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        return cls("box", lo.size, lo=lo, hi=hi)

    @classmethod
    def ball(cls, radius, k=1):
        return cls("ball", k, radius=float(radius))

    @property
    def bounded(self):
        return self.kind != "full_space"

    def diagnostics(self) -> list[str]:
        out = []
        if self.kind == "box":
            if not np.all(self.lo <= self.hi):
                out.append("action box lo <= hi violated")
            if not np.all((self.lo <= 0) & (0 <= self.hi)):
                out.append("0 in A violated")
        if self.kind == "ball" and not self.radius > 0:
            out.append("action ball radius > 0 violated")
        return out

    def project(self, a) -> np.ndarray:
        a = np.asarray(a, float)
        if self.kind == "box":
            return np.clip(a, self.lo, self.hi)
        if self.kind == "ball":
            nrm = np.linalg.norm(a, axis=-1, keepdims=True)
            return a * np.minimum(1.0, self.radius / np.maximum(nrm, 1e-300))
        return a

    def contains(self, a, tol=1e-12) -> np.ndarray:
        a = np.atleast_2d(a)
        if self.kind == "box":
            return np.all((a >= self.lo - tol) & (a <= self.hi + tol), axis=1)
        if self.kind == "ball":
            return np.linalg.norm(a, axis=1) <= self.radius + tol
        return np.all(np.isfinite(a), axis=1)


# --- dynamics ---------------------------------------------------------------

@dataclass(frozen=True)
class DynamicsSpec:
    """Drift b and volatility sigma; the weak formulation only needs beta = sigma^{-1} b.

    ``sigma`` is either a constant (d, d) matrix or a callable ``(t, x) -> (n, d, d)``.
    Affine mode uses ``b1(t, x) -> (n, d, k)`` (or a constant (d, k) matrix) and
    ``b2(t, x, mu, p) -> (n, d)``; measure dependence enters only through ``b2``
    with derivatives ``dm_b2(t, x, mu, p, y) -> (M, n, d)`` and
    ``dp_b2(t, x, mu, p) -> (n, d)``.
    """

    d: int = 1
    k: int = 1
    sigma: object = 1.0
    beta_mode: str = "affine"
    b1: object = None
    b2: Callable | None = None
    drift: Callable | None = None
    dm_b2: Callable | None = None
    dp_b2: Callable | None = None
    measure_dependent: bool = False
    lipschitz_L: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not callable(self.sigma):
            s = np.asarray(self.sigma, float)
            s = s * np.eye(self.d) if s.ndim == 0 else s.reshape(self.d, self.d)
            object.__setattr__(self, "sigma", s)
        if self.beta_mode == "affine" and self.b1 is None:
            object.__setattr__(self, "b1", np.eye(self.d, self.k))
        if self.b1 is not None and not callable(self.b1):
            object.__setattr__(self, "b1", np.asarray(self.b1, float).reshape(self.d, self.k))

    @property
    def constant_sigma(self) -> bool:
        return not callable(self.sigma)

    @property
    def constant_b1(self) -> bool:
        return self.b1 is not None and not callable(self.b1)

    def sigma_at(self, t, x):
        if self.constant_sigma:
            return self.sigma
        return self.sigma(t, x)

    def b1_at(self, t, x):
        return self.b1 if self.constant_b1 else self.b1(t, x)

    def sigma_inverse(self, t, x):
        """sigma^{-1} as (d, d) or (n, d, d), with a residual check."""
        s = self.sigma_at(t, x)
        eye = np.eye(self.d)
        try:
            inv = np.linalg.solve(s, np.broadcast_to(eye, s.shape))
        except np.linalg.LinAlgError as exc:
            raise SingularVolatilityError("volatility matrix is singular") from exc
        resid = np.abs(s @ inv - eye).max(axis=(-2, -1))
        scale = np.abs(s).max(axis=(-2, -1))
        if np.any(~np.isfinite(inv)) or np.any(resid > 1e-10 * np.maximum(scale, 1.0)):
            raise SingularVolatilityError("volatility solve residual above tolerance")
        return inv

    def drift_at(self, t, x, a, mu=None, p=1.0):
        if self.beta_mode == "generic":
            return np.asarray(self.drift(t, x, a, mu, p), float)
        b1 = self.b1_at(t, x)
        out = np.einsum("...ij,nj->ni", b1, a) if b1.ndim == 2 else np.einsum("nij,nj->ni", b1, a)
        if self.b2 is not None:
            out = out + self.b2(t, x, mu, p)
        return out

    def beta_linear(self, t, x):
        """sigma^{-1} b1, shape (d, k) or (n, d, k); affine mode only."""
        return _apply(self.sigma_inverse(t, x), self.b1_at(t, x))

    def beta_offset(self, t, x, mu=None, p=1.0):
        """sigma^{-1} b2, shape (n, d) or None."""
        if self.b2 is None:
            return None
        return _apply_vec(self.sigma_inverse(t, x), self.b2(t, x, mu, p))


def _apply(inv, mat):
    if inv.ndim == 2 and mat.ndim == 2:
        return inv @ mat
    return np.matmul(inv, mat)


def _apply_vec(inv, v):
    if inv.ndim == 2:
        return v @ inv.T
    return np.einsum("nij,nj->ni", inv, v)


def beta_eval(dyn: DynamicsSpec, t, x, a, mu=None, p=1.0) -> np.ndarray:
    """beta = sigma^{-1} b at each particle, shape (n, d)."""
    x = np.atleast_2d(np.asarray(x, float))
    a = np.atleast_2d(np.asarray(a, float))
    inv = dyn.sigma_inverse(t, x)
    if dyn.beta_mode == "affine":
        lin = dyn.beta_linear(t, x)
        out = a @ lin.T if lin.ndim == 2 else np.einsum("nij,nj->ni", lin, a)
        off = dyn.beta_offset(t, x, mu, p)
        return out if off is None else out + off
    return _apply_vec(inv, dyn.drift_at(t, x, a, mu, p))


def controlled_drift(d=1, sigma=1.0, lipschitz_L=None) -> DynamicsSpec:
    """b(t, x, a) = a with constant volatility."""
    sig = np.asarray(sigma, float)
    if lipschitz_L is None:
        inv = np.linalg.inv(sig * np.eye(d) if sig.ndim == 0 else sig)
        lipschitz_L = float(np.linalg.norm(inv, 2))
    return DynamicsSpec(d=d, k=d, sigma=sigma, lipschitz_L=lipschitz_L, name="controlled_drift")


def mean_interaction(eps=0.1, d=1, sigma=1.0) -> DynamicsSpec:
    """b(t, x, a, mu) = a + eps * mean(mu)."""

    def b2(t, x, mu, p):
        return np.broadcast_to(eps * mu.mean(), x.shape).copy()

    def dm_b2(t, x, mu, p, y):
        return (eps * (np.atleast_2d(y) - mu.mean()))[None]

    def dp_b2(t, x, mu, p):
        return np.zeros_like(x)

    base = controlled_drift(d, sigma)
    return replace(base, b2=b2, dm_b2=dm_b2, dp_b2=dp_b2, measure_dependent=True,
                   name="mean_interaction")


# --- costs ------------------------------------------------------------------

def _zero_f2(t, x, mu, p):
    return np.zeros(len(x))


def _zero_dm(*args):
    y = args[-1]
    return np.zeros((1, len(y)))


def _zero_g(x, mu, p):
    return np.zeros(len(x))


@dataclass(frozen=True)
class CostSpec:
    """Running cost w(p) f1(t, x, a) + f2(t, x, mu, p) and terminal g(x, mu, p).

    ``f1_weight`` is an optional survival-dependent multiplier w(p) (default 1)
    with derivative ``f1_weight_p``. ``f1_quad`` is the coefficient c when
    f1 = (c/2)|a|^2 exactly, enabling closed-form Hamiltonian minimization.
    """

    f1: Callable
    f1_a: Callable
    m: float = 0.0
    f1_quad: float | None = None
    f1_weight: Callable | None = None
    f1_weight_p: Callable | None = None
    f2: Callable = _zero_f2
    dm_f2: Callable = _zero_dm
    dp_f2: Callable = _zero_f2
    g: Callable = _zero_g
    dm_g: Callable = _zero_dm
    dp_g: Callable = _zero_g
    running_mf: bool = True
    argmin_linear: Callable | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def weight(self, p):
        return 1.0 if self.f1_weight is None else float(self.f1_weight(p))

    def weight_p(self, p):
        return 0.0 if self.f1_weight_p is None else float(self.f1_weight_p(p))

    def with_terminal(self, g, dm_g, dp_g, name=None):
        return replace(self, g=g, dm_g=dm_g, dp_g=dp_g, name=name or self.name)


def quadratic_control_cost(coef=1.0, **kw) -> CostSpec:
    """f1 = (coef/2)|a|^2, strongly convex with modulus coef."""
    return CostSpec(
        f1=lambda t, x, a: 0.5 * coef * np.sum(a * a, axis=-1),
        f1_a=lambda t, x, a: coef * a,
        m=float(coef),
        f1_quad=float(coef),
        **kw,
    )


# --- initial law and scenario ----------------------------------------------

@dataclass(frozen=True)
class InitialLaw:
    """Point mass, Gaussian or uniform-on-box initial condition."""

    kind: str = "point"
    loc: np.ndarray | float = 0.0
    scale: np.ndarray | float = 1.0
    lo: np.ndarray | float | None = None
    hi: np.ndarray | float | None = None

    def sample(self, seed, n, d, threads=1) -> np.ndarray:
        loc = np.broadcast_to(np.asarray(self.loc, float), (d,))
        if self.kind == "point":
            return np.tile(loc, (n, 1))
        if self.kind == "normal":
            z = _rng.normals(seed, "initial", n, d, threads)
            return loc + np.asarray(self.scale, float) * z
        if self.kind == "uniform":
            u = _rng.uniforms(seed, "initial", n, d, threads)
            lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
            return lo + (hi - lo) * u
        raise ValueError(f"unknown initial law {self.kind!r}")


@dataclass(frozen=True)
class Scenario:
    domain: DomainSpec
    dynamics: DynamicsSpec
    controls: ControlSpace
    cost: CostSpec
    T: float = 1.0
    n_steps: int = 100
    n_particles: int = 10_000
    seed: int = 0
    initial_law: InitialLaw = field(default_factory=InitialLaw)
    bridge_correction: bool = False
    noise: str = "gaussian"
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


# --- validation -------------------------------------------------------------

def _probe_points(s: Scenario, n=64):
    d = s.domain.dim
    pts = s.initial_law.sample(s.seed ^ 0x5A5A, n, d)
    gen = _rng.generator(s.seed, "probe")
    jitter = pts + 0.1 * gen.standard_normal((n, d))
    keep = s.domain.contains(jitter)
    jitter[~keep] = pts[~keep]
    return jitter, gen


def validate_scenario(s: Scenario, n_probe: int = 64) -> list[str]:
    """Diagnostics for violated invariants; an empty list means all hold on the probe."""
    diag = list(s.domain.diagnostics()) + list(s.controls.diagnostics())
    if s.n_steps < 2:
        diag.append("N_t >= 2 violated")
    if s.n_particles < 2:
        diag.append("N >= 2 violated")
    if not s.T > 0:
        diag.append("T > 0 violated")
    if s.dynamics.d != s.domain.dim:
        diag.append("dynamics and domain dimensions differ")
    if s.dynamics.k != s.controls.k:
        diag.append("dynamics and action dimensions differ")
    if s.cost.m < 0:
        diag.append("m >= 0 violated")
    if diag and any("lo < hi" in m or "radius" in m for m in diag):
        return diag

    x0 = s.initial_law.sample(s.seed, n_probe, s.domain.dim)
    if not np.all(s.domain.contains(x0)):
        diag.append("initial law supported in D violated")
    x, gen = _probe_points(s, n_probe)
    t = 0.5 * s.T
    dyn = s.dynamics
    try:
        dyn.sigma_inverse(t, x)
    except SingularVolatilityError:
        diag.append("sigma invertible violated")
    if dyn.beta_mode == "affine":
        b1 = np.broadcast_to(dyn.b1_at(t, x), (n_probe, dyn.d, dyn.k))
        if np.min(np.linalg.svd(b1, compute_uv=False)[:, -1]) <= 1e-10:
            diag.append("b1 full column rank violated")

    w = gen.uniform(0.5, 1.5, n_probe)
    mu = WeightedSample(x, w / w.sum())
    p = 0.7
    cost = s.cost
    a = s.controls.project(gen.standard_normal((n_probe, dyn.k)))
    a2 = s.controls.project(gen.standard_normal((n_probe, dyn.k)))
    mid = 0.5 * (a + a2)
    lhs = cost.f1(t, x, mid) - 0.5 * cost.m * np.sum(mid**2, axis=1)
    rhs = 0.5 * (cost.f1(t, x, a) - 0.5 * cost.m * np.sum(a**2, axis=1)) + 0.5 * (
        cost.f1(t, x, a2) - 0.5 * cost.m * np.sum(a2**2, axis=1))
    if np.min(rhs - lhs) < -1e-10 * (1 + np.abs(rhs).max()):
        diag.append("f1 - (m/2)|a|^2 convex violated")

    def centered(dm):
        vals = np.asarray(dm, float)
        return np.max(np.abs(vals @ mu.weights)) if vals.size else 0.0

    scale = 1.0
    if centered(cost.dm_g(x, mu, p, x)) > 1e-8 * scale:
        diag.append("derivative not centered (dm_g)")
    if centered(cost.dm_f2(t, x, mu, p, x)) > 1e-8 * scale:
        diag.append("derivative not centered (dm_f2)")
    if dyn.measure_dependent and dyn.dm_b2 is not None:
        vals = np.asarray(dyn.dm_b2(t, x, mu, p, x))
        if np.max(np.abs(np.einsum("mnd,n->md", vals, mu.weights))) > 1e-8:
            diag.append("derivative not centered (dm_b2)")
    return diag
