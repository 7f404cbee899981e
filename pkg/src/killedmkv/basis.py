"""State features and weighted ridge regression for conditional expectations."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np


class RegressionSingularError(np.linalg.LinAlgError):
    pass


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    rows = [np.zeros(d, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = np.zeros(d, dtype=int)
            for j in combo:
                e[j] += 1
            rows.append(e)
    return np.array(rows)


@dataclass(frozen=True)
class Basis:
    """Polynomial (total degree) features in standardized state, or piecewise constants on bins.

    kind = "poly": ``degree`` sets the total degree.
    kind = "bins": ``edges`` are the interior cut points of a 1D partition.
    """

    kind: str = "poly"
    degree: int = 2
    edges: tuple | None = None

    def frame(self, x, w=None) -> "Frame":
        x = np.atleast_2d(x)
        if self.kind == "bins":
            return Frame(self, np.zeros(x.shape[1]), np.ones(x.shape[1]))
        w = np.ones(len(x)) if w is None else w
        tot = w.sum()
        if tot <= 0:
            return Frame(self, np.zeros(x.shape[1]), np.ones(x.shape[1]))
        c = w @ x / tot
        sd = np.sqrt(np.maximum(w @ (x - c) ** 2 / tot, 0.0))
        sd = np.where(sd > 1e-12, sd, 1.0)
        return Frame(self, c, sd)


@dataclass(frozen=True)
class Frame:
    basis: Basis
    center: np.ndarray
    scale: np.ndarray

    def features(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.basis.kind == "bins":
            idx = np.searchsorted(np.asarray(self.basis.edges), x[:, 0], side="right")
            out = np.zeros((len(x), len(self.basis.edges) + 1))
            out[np.arange(len(x)), idx] = 1.0
            return out
        z = (x - self.center) / self.scale
        exps = monomial_exponents(x.shape[1], self.basis.degree)
        out = np.ones((len(x), len(exps)))
        for j, e in enumerate(exps[1:], start=1):
            out[:, j] = np.prod(z ** e, axis=1)
        return out


def weighted_ridge(phi, target, w, ridge=1e-8, max_cond=1e12, escalations=6):
    """Solve min sum_i w_i |phi_i c - target_i|^2 + ridge*tr(G)/nb*|c|^2.

    Returns (coef, condition number). The ridge is escalated tenfold while the
    regularized Gram matrix has condition number above ``max_cond``.
    """
    target = np.asarray(target, float)
    vec = target.ndim == 1
    if vec:
        target = target[:, None]
    pw = phi * w[:, None]
    gram = pw.T @ phi
    rhs = pw.T @ target
    nb = gram.shape[0]
    tr = np.trace(gram)
    if tr <= 0:
        return np.zeros((nb,) + target.shape[1:]).squeeze(-1) if vec else np.zeros((nb, target.shape[1])), np.inf
    # columns with no support (empty bins) would only carry the ridge
    lam = ridge * tr / nb
    for _ in range(escalations + 1):
        mat = gram + lam * np.eye(nb)
        cond = np.linalg.cond(mat)
        if np.isfinite(cond) and cond <= max_cond:
            coef = np.linalg.solve(mat, rhs)
            return (coef[:, 0] if vec else coef), cond
        lam *= 10.0
    raise RegressionSingularError(f"regression Gram matrix condition number {cond:.3g} above {max_cond:.0e}")


def r_squared(y, yhat, w):
    tot = w.sum()
    if tot <= 0:
        return np.nan
    m = w @ y / tot
    ss = w @ (y - m) ** 2
    if ss <= 1e-300:
        return 1.0
    return float(1.0 - w @ (y - yhat) ** 2 / ss)
