"""Weighted empirical measures, measure flows and distances between them."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gamma, kv
from scipy.stats import qmc


class SupportMismatchError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedSample:
    """Atoms ``points`` (n, d) carrying nonnegative ``weights`` (n,)."""

    points: np.ndarray
    weights: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if w.shape[0] < 1:
            raise ValueError("empty sample")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if self.normalized and abs(w.sum() - 1.0) > 1e-12 * max(1, w.size**0.5):
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, points, weights):
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise ValueError("zero total mass")
        return cls(points, w / total)

    @classmethod
    def uniform(cls, points):
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> np.ndarray:
        return self.weights @ self.points / self.mass

    def variance(self) -> float:
        """Total variance E||X - E X||^2."""
        m = self.mean()
        return float(self.weights @ np.sum((self.points - m) ** 2, axis=1) / self.mass)

    def expect(self, values) -> float:
        return float(self.weights @ np.asarray(values) / self.mass)

    def mix(self, other: "WeightedSample", lam: float) -> "WeightedSample":
        """(1 - lam) * self + lam * other on the concatenated support."""
        pts = np.vstack([self.points, other.points])
        w = np.concatenate([(1 - lam) * self.weights, lam * other.weights])
        return WeightedSample(pts, w, normalized=self.normalized and other.normalized)

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        cols = ["weight"] + [f"x{j}" for j in range(self.dim)]
        buf.write(",".join(cols) + "\n")
        np.savetxt(buf, np.column_stack([self.weights, self.points]), delimiter=",", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, normalized=True):
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        return cls(data[:, 1:], data[:, 0], normalized=normalized)


@dataclass(frozen=True)
class SignedMeasureRepr:
    """Signed measure ``positive - negative`` with unconstrained masses."""

    positive: WeightedSample
    negative: WeightedSample | None = None

    @classmethod
    def from_atoms(cls, points, signed_weights):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(signed_weights, dtype=float)
        pos = WeightedSample(pts, np.clip(w, 0, None), normalized=False)
        neg = WeightedSample(pts, np.clip(-w, 0, None), normalized=False)
        return cls(pos, neg)

    @classmethod
    def difference(cls, a: WeightedSample, b: WeightedSample, ca=1.0, cb=1.0):
        """ca * a - cb * b."""
        return cls(
            WeightedSample(a.points, ca * a.weights, normalized=False),
            WeightedSample(b.points, cb * b.weights, normalized=False),
        )

    def atoms(self):
        if self.negative is None:
            return self.positive.points, self.positive.weights
        pts = np.vstack([self.positive.points, self.negative.points])
        w = np.concatenate([self.positive.weights, -self.negative.weights])
        return pts, w

    @property
    def dim(self):
        return self.positive.dim

    @property
    def total_variation(self):
        pts, w = self.atoms()
        _, merged = _merge_rows(pts, w)
        return float(np.abs(merged).sum())


@dataclass(frozen=True)
class MeasureFlow:
    """Per-time conditional law of the survivors and survival probability."""

    times: np.ndarray
    laws: tuple
    survival: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "survival", np.asarray(self.survival, dtype=float))
        object.__setattr__(self, "laws", tuple(self.laws))
        if not (len(self.laws) == self.times.size == self.survival.size):
            raise GridMismatchError("times, laws and survival must have equal length")

    def __len__(self):
        return self.times.size

    def check(self, domain=None, tol=1e-12) -> list[str]:
        problems = []
        if abs(self.survival[0] - 1.0) > tol:
            problems.append("p_0 = 1 violated")
        if np.any(np.diff(self.survival) > tol):
            problems.append("survival not non-increasing")
        if np.any(self.survival <= 0) or np.any(self.survival > 1 + tol):
            problems.append("survival outside (0, 1]")
        for law in self.laws:
            if abs(law.mass - 1) > 1e-10:
                problems.append("conditional law not normalized")
                break
        if domain is not None:
            for law in self.laws:
                if not np.all(domain.contains(law.points[law.weights > 0])):
                    problems.append("support point outside domain")
                    break
        return problems

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        d = self.laws[0].dim
        buf.write(",".join(["time", "survival", "weight"] + [f"x{j}" for j in range(d)]) + "\n")
        for t, p, law in zip(self.times, self.survival, self.laws):
            n = law.size
            block = np.column_stack([np.full(n, t), np.full(n, p), law.weights, law.points])
            np.savetxt(buf, block, delimiter=",", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str):
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        times, first = np.unique(data[:, 0], return_index=True)
        laws, surv = [], []
        for t in times:
            rows = data[data[:, 0] == t]
            surv.append(rows[0, 1])
            laws.append(WeightedSample(rows[:, 3:], rows[:, 2]))
        return cls(times, laws, surv)


class Binning:
    """Equal-width bins over a box; points outside are clipped to edge bins."""

    def __init__(self, lo, hi, bins=64):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if np.any(self.hi <= self.lo):
            raise ValueError("binning requires lo < hi")
        self.bins = np.full(self.lo.shape, int(bins)) if np.isscalar(bins) else np.asarray(bins)

    @classmethod
    def covering(cls, *samples, bins=64, pad=1e-9):
        pts = np.vstack([s.points for s in samples])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        return cls(lo - pad * span, hi + pad * span, bins)

    @property
    def n_cells(self):
        return int(np.prod(self.bins))

    def index(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        rel = (pts - self.lo) / (self.hi - self.lo)
        idx = np.clip(np.floor(rel * self.bins).astype(int), 0, self.bins - 1)
        return np.ravel_multi_index(idx.T, self.bins)

    def centers(self) -> np.ndarray:
        axes = [self.lo[j] + (np.arange(self.bins[j]) + 0.5) * (self.hi[j] - self.lo[j]) / self.bins[j]
                for j in range(self.lo.size)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def histogram(self, sample: WeightedSample) -> np.ndarray:
        return np.bincount(self.index(sample.points), weights=sample.weights, minlength=self.n_cells)


def _merge_rows(points, weights):
    uniq, inv = np.unique(points, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.reshape(-1), weights=weights, minlength=uniq.shape[0])


def aligned_weights(mu: WeightedSample, nu: WeightedSample, binning: Binning | None = None):
    """Weight vectors of ``mu`` and ``nu`` on a common support."""
    if mu.dim != nu.dim:
        raise SupportMismatchError(f"dimension {mu.dim} vs {nu.dim}")
    if binning is not None:
        return binning.histogram(mu), binning.histogram(nu)
    if mu.points.shape == nu.points.shape and (mu.points is nu.points or np.array_equal(mu.points, nu.points)):
        return mu.weights, nu.weights
    pts = np.vstack([mu.points, nu.points])
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    a = np.bincount(inv[: mu.size], weights=mu.weights, minlength=uniq.shape[0])
    b = np.bincount(inv[mu.size:], weights=nu.weights, minlength=uniq.shape[0])
    shared = np.count_nonzero((a > 0) & (b > 0))
    if shared == 0 and np.count_nonzero(a) > 1 and np.count_nonzero(b) > 1:
        raise SupportMismatchError("samples share no atoms; supply a binning")
    return a, b


def tv_distance(mu, nu, binning=None) -> float:
    a, b = aligned_weights(mu, nu, binning)
    return float(0.5 * np.abs(a - b).sum())


def lecam_distance(mu, nu, binning=None) -> float:
    a, b = aligned_weights(mu, nu, binning)
    s = a + b
    keep = s > 0
    return float(np.sqrt(0.5 * np.sum((a[keep] - b[keep]) ** 2 / s[keep])))


def relative_entropy(mu, nu, binning=None) -> float:
    a, b = aligned_weights(mu, nu, binning)
    pos = a > 0
    if np.any(b[pos] <= 0):
        return float("inf")
    return float(np.sum(a[pos] * np.log(a[pos] / b[pos])))


def flow_distance(F: MeasureFlow, G: MeasureFlow, binning=None) -> float:
    """sqrt of max over grid times of d_LC(mu_t, mu'_t)^2 + (p_t - p'_t)^2."""
    if F.times.shape != G.times.shape or not np.allclose(F.times, G.times, rtol=0, atol=1e-12):
        raise GridMismatchError("flows live on different time grids")
    worst = 0.0
    for mu, nu, p, q in zip(F.laws, G.laws, F.survival, G.survival):
        worst = max(worst, lecam_distance(mu, nu, binning) ** 2 + (p - q) ** 2)
    return float(np.sqrt(worst))


# --- Fourier-Wasserstein (negative Sobolev) norm ---------------------------

def fw_characteristic(zeta: SignedMeasureRepr, freqs) -> np.ndarray:
    """(2 pi)^{-d/2} sum_i w_i exp(-i x_i . xi) for each row of ``freqs``."""
    pts, w = zeta.atoms()
    d = pts.shape[1]
    xi = np.atleast_2d(np.asarray(freqs, dtype=float))
    if xi.shape[1] != d and xi.shape[0] == d:
        xi = xi.T
    out = np.empty(xi.shape[0], dtype=complex)
    for s in range(0, xi.shape[0], 2048):
        phase = xi[s:s + 2048] @ pts.T
        out[s:s + 2048] = np.exp(-1j * phase) @ w
    return out * (2 * np.pi) ** (-d / 2)


def sobolev_kernel(r, s: float, d: int) -> np.ndarray:
    """K(r) with ||zeta||^2_{-s} = sum_ij w_i w_j K(|x_i - x_j|).

    K(r) = (2 pi)^{-d} * int (1+|xi|^2)^{-s} cos(xi . r) dxi, the Bessel potential
    (2 pi)^{-d/2} 2^{1-s} / Gamma(s) * r^nu K_nu(r), nu = s - d/2.
    """
    if s <= d / 2:
        raise ValueError(f"need s > d/2, got s={s}, d={d}")
    nu = s - d / 2
    r = np.asarray(r, dtype=float)
    c = (2 * np.pi) ** (-d / 2) * 2 ** (1 - s) / gamma(s)
    if abs(nu - 0.5) < 1e-15:
        return c * np.sqrt(np.pi / 2) * np.exp(-r)
    out = np.empty_like(r)
    small = r < 1e-12
    rr = r[~small]
    out[~small] = c * rr**nu * kv(nu, rr)
    out[small] = (2 * np.pi) ** (-d) * np.pi ** (d / 2) * gamma(nu) / gamma(s)
    return out


def compress_atoms(points, weights, max_atoms=4096, grid=512):
    """Deposit many atoms on a uniform grid (linear weights in 1D, nearest cell otherwise)."""
    n, d = points.shape
    if n <= max_atoms:
        return points, weights
    lo, hi = points.min(axis=0), points.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    if d == 1:
        h = (hi[0] - lo[0]) / (grid - 1)
        u = (points[:, 0] - lo[0]) / h
        j = np.clip(np.floor(u).astype(int), 0, grid - 2)
        frac = u - j
        w = np.bincount(j, weights=weights * (1 - frac), minlength=grid)
        w += np.bincount(j + 1, weights=weights * frac, minlength=grid)
        nodes = lo[0] + h * np.arange(grid)
        return nodes[:, None], w
    per_dim = max(4, int(round(max_atoms ** (1.0 / d))))
    b = Binning(lo, hi + 1e-12 * (hi - lo), per_dim)
    idx = b.index(points)
    w = np.bincount(idx, weights=weights, minlength=b.n_cells)
    keep = w != 0
    return b.centers()[keep], w[keep]


def fw_gram(x, y, s):
    d = x.shape[1]
    r = np.sqrt(np.maximum(np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1), 0.0))
    return sobolev_kernel(r, s, d)


def fw_potential(zeta: SignedMeasureRepr, y, s, max_atoms=4096):
    """(K zeta)(y) = sum_i w_i K(|y - x_i|) evaluated at rows of ``y``."""
    pts, w = zeta.atoms()
    pts, w = compress_atoms(pts, w, max_atoms)
    y = np.atleast_2d(y)
    out = np.empty(y.shape[0])
    step = max(1, 4_000_000 // max(pts.shape[0], 1))
    for a in range(0, y.shape[0], step):
        out[a:a + step] = fw_gram(y[a:a + step], pts, s) @ w
    return out


def fw_inner(z1: SignedMeasureRepr, z2: SignedMeasureRepr, s, max_atoms=4096) -> float:
    p1, w1 = z1.atoms()
    p1, w1 = compress_atoms(p1, w1, max_atoms)
    return float(w1 @ fw_potential(z2, p1, s, max_atoms))


def fw_norm_sq(zeta: SignedMeasureRepr, s: float = 1.0, max_atoms=4096) -> float:
    """||zeta||^2_{-s} via the closed-form Bessel-potential kernel."""
    pts, w = zeta.atoms()
    pts, w = _merge_rows(pts, w)
    pts, w = compress_atoms(pts, w, max_atoms)
    if not np.any(w):
        return 0.0
    val = float(w @ fw_gram(pts, pts, s) @ w)
    return max(val, 0.0)


def fw_norm_sq_quadrature(zeta: SignedMeasureRepr, s: float = 1.0, nodes: int = 2**16, seed: int = 0,
                          cutoff: float = 200.0) -> float:
    """Frequency-domain evaluation of the same norm.

    d = 1: |Phi|^2 is even, so the integral is twice that over [0, inf). The
    head [0, cutoff] uses composite Simpson on ``nodes`` intervals; the tail is
    sum_ij w_i w_j (1/pi) int_cutoff^inf cos(r_ij xi) (1+xi^2)^{-s} dxi, one
    Fourier-weighted adaptive quadrature per distinct distance. Clouds above
    64 atoms are first deposited on a uniform grid. d >= 2: scrambled Sobol
    points pushed through a multivariate t proposal whose tail matches
    (1+|xi|^2)^{-s}.
    """
    d = zeta.dim
    if s <= d / 2:
        raise ValueError("need s > d/2")
    if d == 1:
        pts, w = zeta.atoms()
        pts, w = _merge_rows(pts, w)
        pts, w = compress_atoms(pts, w, max_atoms=64, grid=512)
        x = pts[:, 0]
        n = nodes + (nodes % 2)
        xi = np.linspace(0.0, cutoff, n + 1)
        vals = np.empty(n + 1)
        for a in range(0, n + 1, 8192):
            ph = np.exp(-1j * np.outer(xi[a:a + 8192], x)) @ w
            vals[a:a + 8192] = np.abs(ph) ** 2 / (2 * np.pi)
        vals *= (1 + xi**2) ** (-s)
        sw = np.ones(n + 1)
        sw[1:-1:2] = 4
        sw[2:-1:2] = 2
        head = (cutoff / n) / 3 * sw @ vals
        r = np.abs(x[:, None] - x[None, :])
        key = np.round(r, 12)
        uniq, inv = np.unique(key, return_inverse=True)
        pair_w = np.bincount(inv.reshape(-1), weights=np.outer(w, w).reshape(-1), minlength=uniq.size)
        kern = lambda t: (1 + t * t) ** (-s)
        tail = 0.0
        for rr, pw in zip(uniq, pair_w):
            if pw == 0:
                continue
            if rr == 0:
                val, _ = integrate.quad(kern, cutoff, np.inf)
            else:
                val, _ = integrate.quad(kern, cutoff, np.inf, weight="cos", wvar=rr)
            tail += pw * val / (2 * np.pi)
        return float(2 * (head + tail))
    nu = 2 * s - d
    m = 2 ** int(np.ceil(np.log2(max(nodes, 2))))
    sob = qmc.Sobol(d + 1, scramble=True, seed=seed).random(m)
    sob = np.clip(sob, 1e-12, 1 - 1e-12)
    from scipy.stats import chi2, norm, multivariate_t
    z = norm.ppf(sob[:, :d])
    g = chi2.ppf(sob[:, d], df=nu)
    xi = z / np.sqrt(g / nu)[:, None]
    q = multivariate_t(loc=np.zeros(d), shape=np.eye(d), df=nu).pdf(xi)
    wts = (1 + np.sum(xi**2, axis=1)) ** (-s) / q
    return float(np.mean(wts * np.abs(fw_characteristic(zeta, xi)) ** 2))
