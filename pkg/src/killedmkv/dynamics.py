"""Killed particle simulation under the reference measure and Girsanov reweighting."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng
from .basis import Basis, weighted_ridge
from .measures import MeasureFlow, WeightedSample
from .model import ControlSpace, CostSpec, DomainError, DynamicsSpec, Scenario, beta_eval

LOG_CLIP = 500.0


class ExtinctionError(RuntimeError):
    pass


class NonfiniteWeightError(FloatingPointError):
    pass


class MixingError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleEnsemble:
    """Reference-measure paths plus the running log density of the current control.

    ``exit_step[i]`` is the first grid index at which particle i is killed
    (``n_steps + 1`` if it survives); it is alive at step k iff k < exit_step.
    ``log_weights[:, k]`` is log E_k, frozen after exit. ``beta`` and
    ``actions`` hold the per-step values used by the last reweighting.
    """

    times: np.ndarray
    paths: np.ndarray
    dW: np.ndarray
    exit_step: np.ndarray
    log_weights: np.ndarray
    seed: int = 0
    noise: str = "gaussian"
    beta: np.ndarray | None = None
    actions: np.ndarray | None = None
    clip_count: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_particles(self):
        return self.paths.shape[0]

    @property
    def n_steps(self):
        return self.paths.shape[1] - 1

    @property
    def dim(self):
        return self.paths.shape[2]

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def alive(self):
        return np.arange(self.n_steps + 1)[None, :] < self.exit_step[:, None]

    def alive_at(self, k):
        return self.exit_step > k

    @property
    def survived(self):
        return self.exit_step > self.n_steps

    def dW_alpha(self, k):
        """Increment of the P^alpha Brownian motion, dW - beta dt (zero after exit)."""
        out = self.dW[:, k].copy()
        if self.beta is not None:
            out -= self.beta[:, k] * self.dt
        out[~self.alive_at(k)] = 0.0
        return out

    # serialization -------------------------------------------------------
    _MAGIC = b"KMKVENS1"

    def to_bytes(self) -> bytes:
        """Layout: 8-byte magic, then little-endian uint64 N, N_t, d, seed,
        then float64 arrays times (N_t+1), paths (N, N_t+1, d), dW (N, N_t, d),
        log_weights (N, N_t+1), and exit_step as int64 (N)."""
        n, nt, d = self.n_particles, self.n_steps, self.dim
        head = self._MAGIC + struct.pack("<4Q", n, nt, d, int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.times, self.paths, self.dW, self.log_weights))
        return head + body + np.ascontiguousarray(self.exit_step, dtype="<i8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParticleEnsemble":
        if blob[:8] != cls._MAGIC:
            raise ValueError("not an ensemble snapshot")
        n, nt, d, seed = struct.unpack("<4Q", blob[8:40])
        off = 40
        arrays = []
        for shape in [(nt + 1,), (n, nt + 1, d), (n, nt, d), (n, nt + 1)]:
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(blob, "<f8", size, off).reshape(shape).copy())
            off += 8 * size
        exit_step = np.frombuffer(blob, "<i8", n, off).copy()
        return cls(arrays[0], arrays[1], arrays[2], exit_step, arrays[3], seed=int(seed))

    def summary_csv(self, header="") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("step,time,alive,survival,mean_weight\n")
        w = self.weights
        alive = self.alive
        for k, t in enumerate(self.times):
            a = alive[:, k]
            buf.write(f"{k},{t:.10g},{int(a.sum())},{(w[:, k] * a).mean():.17g},{w[:, k].mean():.17g}\n")
        return buf.getvalue()


# --- controls ---------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackTable:
    """Per-step regression of actions on state features: a_k(x) = phi_k(x) @ coef[k]."""

    basis: Basis
    frames: tuple
    coef: np.ndarray

    def __call__(self, k, t, x):
        return self.frames[k].features(x) @ self.coef[k]


@dataclass(frozen=True)
class ControlField:
    """An admissible control: open-loop table, feedback map, or a mixture of two controls.

    kind = "open_loop": ``values`` of shape (N, N_t, k) tied to one ensemble.
    kind = "feedback": ``fn(k, t, x) -> (n, k)``.
    kind = "mixture": ``parts = (alpha, alpha_prime, lam)``, the control whose law
    is (1 - lam) P^alpha + lam P^alpha'.
    """

    space: ControlSpace
    kind: str = "feedback"
    values: np.ndarray | None = None
    fn: Callable | None = None
    parts: tuple | None = None

    @classmethod
    def zero(cls, space: ControlSpace):
        k = space.k
        return cls(space, "feedback", fn=lambda step, t, x: np.zeros((len(x), k)))

    @classmethod
    def constant(cls, space: ControlSpace, c):
        c = np.atleast_1d(np.asarray(c, float))
        return cls(space, "feedback", fn=lambda step, t, x: np.tile(c, (len(x), 1)))

    @classmethod
    def feedback(cls, space: ControlSpace, fn):
        return cls(space, "feedback", fn=fn)

    @classmethod
    def open_loop(cls, space: ControlSpace, values):
        return cls(space, "open_loop", values=np.asarray(values, float))

    def raw_at(self, ens: ParticleEnsemble, k) -> np.ndarray:
        if self.kind == "open_loop":
            return self.values[:, k]
        if self.kind == "feedback":
            return np.asarray(self.fn(k, ens.times[k], ens.paths[:, k]), float).reshape(ens.n_particles, -1)
        raise MixingError("mixture controls are evaluated inside reweight")

    def at(self, ens: ParticleEnsemble, k) -> np.ndarray:
        """Projected actions at step k, zero after exit."""
        a = self.space.project(self.raw_at(ens, k))
        return np.where(ens.alive_at(k)[:, None], a, 0.0)

    def table(self, ens: ParticleEnsemble) -> np.ndarray:
        if self.kind == "mixture":
            raise MixingError("reweight a mixture to obtain its table")
        return np.stack([self.at(ens, k) for k in range(ens.n_steps)], axis=1)

    def shifted(self, ens, eta: "ControlField", eps: float) -> "ControlField":
        """Open-loop alpha + eps * eta on the ensemble (projected onto A)."""
        return ControlField.open_loop(self.space, self.table(ens) + eps * eta.table(ens))


def fit_feedback(ens: ParticleEnsemble, actions, basis=Basis("poly", 1)) -> ControlField:
    """Distill an open-loop table into a feedback map by weighted per-step regression."""
    frames, coefs = [], []
    w_all = ens.weights
    for k in range(ens.n_steps):
        al = ens.alive_at(k)
        x = ens.paths[al, k]
        w = w_all[al, k]
        fr = basis.frame(x, w)
        c, _ = weighted_ridge(fr.features(x), actions[al, k], w)
        frames.append(fr)
        coefs.append(c)
    space = ControlSpace.full_space(actions.shape[2])
    return ControlField.feedback(space, FeedbackTable(basis, tuple(frames), np.array(coefs)))


# --- simulation -------------------------------------------------------------

def _bridge_kill(x0, x1, sig, dt, barriers):
    """Probability that a Brownian bridge from x0 to x1 crossed any barrier."""
    surv = np.ones_like(x0)
    for level in barriers:
        if level is None:
            continue
        arg = -2.0 * (x0 - level) * (x1 - level) / (sig**2 * dt)
        surv *= 1.0 - np.exp(np.minimum(arg, 0.0))
    return 1.0 - surv


def simulate_reference(s: Scenario, threads: int = 1, n_particles=None, seed=None) -> ParticleEnsemble:
    """Euler scheme with zero drift and volatility sigma; killing at the first exit.

    With ``s.bridge_correction`` (1D half-line/interval only) a particle is also
    killed on step k -> k+1 with the Brownian-bridge crossing probability.
    With ``s.noise == "rademacher"`` the increments are +-sqrt(dt).
    """
    n = int(n_particles or s.n_particles)
    seed = s.seed if seed is None else seed
    nt, d, dt = s.n_steps, s.domain.dim, s.dt
    times = s.times
    x0 = s.initial_law.sample(seed, n, d, threads)
    inside = s.domain.contains(x0)
    if not np.all(inside):
        raise DomainError(f"{int((~inside).sum())} initial points outside the domain")
    if s.noise == "rademacher":
        u = rng.uniforms(seed, "increments", n, nt * d, threads)
        dW = np.where(u < 0.5, -1.0, 1.0).reshape(n, nt, d) * np.sqrt(dt)
    else:
        dW = rng.normals(seed, "increments", n, nt * d, threads).reshape(n, nt, d) * np.sqrt(dt)
    barriers = s.domain.boundaries_1d() if s.bridge_correction else None
    if s.bridge_correction and barriers is None:
        raise DomainError("bridge correction needs a 1D half-line or interval domain")
    ub = rng.uniforms(seed, "bridge", n, nt, threads) if barriers else None

    paths = np.empty((n, nt + 1, d))
    paths[:, 0] = x0
    exit_step = np.full(n, nt + 1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    dyn = s.dynamics
    # lattice walks are rebuilt from integer step counts so equal nodes carry equal floats
    lattice = s.noise == "rademacher" and dyn.constant_sigma
    counts = np.zeros((n, d))
    for k in range(nt):
        x = paths[:, k]
        sig = dyn.sigma_at(times[k], x)
        if lattice:
            c1 = np.where(alive[:, None], counts + np.sign(dW[:, k]), counts)
            x1 = x0 + (c1 * np.sqrt(dt)) @ sig.T
        else:
            step = dW[:, k] @ sig.T if sig.ndim == 2 else np.einsum("nij,nj->ni", sig, dW[:, k])
            x1 = np.where(alive[:, None], x + step, x)
        killed = alive & ~s.domain.contains(x1)
        if barriers:
            s1 = sig[0, 0] if sig.ndim == 2 else sig[:, 0, 0]
            pk = _bridge_kill(x[:, 0], x1[:, 0], s1, dt, barriers)
            killed |= alive & (ub[:, k] < pk)
        exit_step[killed] = k + 1
        alive &= ~killed
        if lattice:
            counts = c1
        paths[:, k + 1] = x1
    return ParticleEnsemble(times, paths, dW, exit_step, np.zeros((n, nt + 1)),
                            seed=seed, noise=s.noise)


def _log_increment(beta, dw, dt, noise):
    if noise == "rademacher":
        # exact binary likelihood ratio: P^a(dW = +h) = (1 + beta h) / 2
        h = np.sqrt(dt)
        bh = np.clip(beta * np.sign(dw) * h, -1 + 1e-15, None)
        return np.sum(np.log1p(bh), axis=1)
    return np.sum(beta * dw, axis=1) - 0.5 * np.sum(beta * beta, axis=1) * dt


def _beta_step(dyn, ens, k, a, flow):
    t = ens.times[k]
    mu = flow.laws[k] if flow is not None else None
    p = float(flow.survival[k]) if flow is not None else 1.0
    if dyn.measure_dependent and flow is None:
        raise ValueError("measure-dependent dynamics need a flow")
    return beta_eval(dyn, t, ens.paths[:, k], a, mu, p)


def reweight(ens: ParticleEnsemble, alpha: ControlField, flow: MeasureFlow | None, dyn: DynamicsSpec) -> ParticleEnsemble:
    """Running densities E_k of P^alpha with respect to the reference measure."""
    n, nt, dt = ens.n_particles, ens.n_steps, ens.dt
    if flow is not None and len(flow) != nt + 1:
        raise ValueError("flow and ensemble grids differ")
    logw = np.zeros((n, nt + 1))
    betas = np.zeros((n, nt, dyn.d))
    actions = np.zeros((n, nt, dyn.k))
    clips = 0
    if alpha.kind == "mixture":
        a0, a1, lam = alpha.parts
        if dyn.beta_mode != "affine":
            raise MixingError("mixing requires affine dynamics")
        l0 = np.zeros(n)
        l1 = np.zeros(n)
    for k in range(nt):
        al = ens.alive_at(k)
        if alpha.kind == "mixture":
            ua, ub = a0.at(ens, k), a1.at(ens, k)
            ba, bb = _beta_step(dyn, ens, k, ua, flow), _beta_step(dyn, ens, k, ub, flow)
            # iota = lam E' / (lam E' + (1 - lam) E) in log space
            with np.errstate(divide="ignore"):
                iota = 1.0 / (1.0 + np.exp(np.log1p(-lam) - np.log(lam) + l0 - l1)) if 0 < lam < 1 else np.full(n, float(lam))
            a = iota[:, None] * ub + (1 - iota[:, None]) * ua
            beta = iota[:, None] * bb + (1 - iota[:, None]) * ba
            inc0 = np.where(al, _log_increment(ba, ens.dW[:, k], dt, ens.noise), 0.0)
            inc1 = np.where(al, _log_increment(bb, ens.dW[:, k], dt, ens.noise), 0.0)
            l0, l1 = l0 + inc0, l1 + inc1
            if lam <= 0:
                new = l0
            elif lam >= 1:
                new = l1
            else:
                new = np.logaddexp(np.log1p(-lam) + l0, np.log(lam) + l1)
            logw[:, k + 1] = new
        else:
            a = alpha.at(ens, k)
            beta = _beta_step(dyn, ens, k, a, flow)
            inc = np.where(al, _log_increment(beta, ens.dW[:, k], dt, ens.noise), 0.0)
            logw[:, k + 1] = logw[:, k] + inc
        beta = np.where(al[:, None], beta, 0.0)
        betas[:, k] = beta
        actions[:, k] = np.where(al[:, None], a, 0.0)
        over = np.abs(logw[:, k + 1]) > LOG_CLIP
        if np.any(over):
            clips += int(over.sum())
            logw[:, k + 1] = np.clip(logw[:, k + 1], -LOG_CLIP, LOG_CLIP)
    if not np.all(np.isfinite(logw)):
        raise NonfiniteWeightError("nonfinite log-weights")
    return replace(ens, log_weights=logw, beta=betas, actions=actions, clip_count=clips)


def mix_controls(alpha: ControlField, alpha_prime: ControlField, lam: float, ens=None) -> ControlField:
    """Control realizing lam P^alpha' + (1 - lam) P^alpha.

    Its action is iota alpha' + (1 - iota) alpha with
    iota = lam E' / (lam E' + (1 - lam) E); reweighting it yields
    E^lam = lam E' + (1 - lam) E per path. The open-loop table is available
    from ``reweight(...).actions``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return ControlField(alpha.space, "mixture", parts=(alpha, alpha_prime, float(lam)))


def empirical_flow(ens: ParticleEnsemble) -> MeasureFlow:
    """Per-step survival p_k = mean(E_k 1{alive}) and E-weighted law of survivors."""
    laws, surv = [], []
    w = ens.weights
    n = ens.n_particles
    for k in range(ens.n_steps + 1):
        al = ens.alive_at(k)
        wk = w[al, k]
        tot = wk.sum()
        if not al.any() or tot <= 0:
            raise ExtinctionError(f"no surviving mass at step {k}")
        surv.append(tot / n)
        laws.append(WeightedSample(ens.paths[al, k], wk / tot))
    surv = np.minimum.accumulate(np.array(surv))
    return MeasureFlow(ens.times, laws, surv)


def cost_contributions(ens: ParticleEnsemble, flow: MeasureFlow, cost: CostSpec) -> np.ndarray:
    """Per-particle E-weighted cost: sum_k E_k f_k dt on alive steps + E_N g on survivors."""
    n, nt, dt = ens.n_particles, ens.n_steps, ens.dt
    w = ens.weights
    if ens.actions is None:
        raise ValueError("ensemble has not been reweighted")
    out = np.zeros(n)
    for k in range(nt):
        al = ens.alive_at(k)
        t = ens.times[k]
        x = ens.paths[al, k]
        mu, p = flow.laws[k], float(flow.survival[k])
        f = cost.weight(p) * cost.f1(t, x, ens.actions[al, k]) + cost.f2(t, x, mu, p)
        out[al] += w[al, k] * f * dt
    sv = ens.survived
    g = cost.g(ens.paths[sv, nt], flow.laws[nt], float(flow.survival[nt]))
    out[sv] += w[sv, nt] * g
    return out


def cost_estimate(ens, alpha, flow, cost: CostSpec):
    """(J, SE) of the cost under P^alpha from an ensemble reweighted by alpha."""
    c = cost_contributions(ens, flow, cost)
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(c.size))


def entropy_contributions(ens: ParticleEnsemble) -> np.ndarray:
    """Per-particle E_T log E_T; its mean estimates H(P^alpha | P) on F_{T and tau}."""
    e = ens.log_weights[:, -1]
    return np.exp(e) * e


def terminal_log_weight(ens: ParticleEnsemble) -> np.ndarray:
    return ens.log_weights[:, -1]
