"""Fixed point of the flow map (mu, p) -> law of the survivors under the measure built from (mu, p)."""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import ControlField, ParticleEnsemble, empirical_flow, reweight
from .measures import Binning, MeasureFlow, SupportMismatchError, flow_distance
from .model import DynamicsSpec


class NonContractionWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PicardResult:
    flow: MeasureFlow
    ensemble: ParticleEnsemble
    trace: np.ndarray
    survival_T: np.ndarray
    converged: bool

    def trace_csv(self, header="") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("iteration,distance,p_T\n")
        for j, (dist, p) in enumerate(zip(self.trace, self.survival_T), start=1):
            buf.write(f"{j},{dist:.17g},{p:.17g}\n")
        return buf.getvalue()


def _distance(f, g):
    try:
        return flow_distance(f, g)
    except SupportMismatchError:
        # an initial guess on other atoms is compared after shared binning
        b = Binning.covering(*f.laws, *g.laws)
        return flow_distance(f, g, b)


def reference_flow(ens: ParticleEnsemble) -> MeasureFlow:
    """Flow of the reference measure (unit weights) on the ensemble's paths."""
    from dataclasses import replace
    return empirical_flow(replace(ens, log_weights=np.zeros_like(ens.log_weights)))


def picard_solve(ens: ParticleEnsemble, alpha: ControlField, dyn: DynamicsSpec,
                 max_iters: int = 50, tol: float = 1e-4, init_flow: MeasureFlow | None = None) -> PicardResult:
    """Iterate flow <- empirical_flow(reweight(ens, alpha, flow)) on common random numbers.

    When the drift does not depend on (mu, p) the map is constant and one
    evaluation is returned with distance 0. A warning is issued if the distance
    trace fails to decrease three times in a row.
    """
    if init_flow is None:
        init_flow = reference_flow(ens)
    if not dyn.measure_dependent:
        e = reweight(ens, alpha, None, dyn)
        f = empirical_flow(e)
        return PicardResult(f, e, np.array([0.0]), np.array([f.survival[-1]]), True)
    flow = init_flow
    trace, surv = [], []
    rises = 0
    converged = False
    e = None
    for _ in range(max_iters):
        e = reweight(ens, alpha, flow, dyn)
        new = empirical_flow(e)
        dist = _distance(new, flow)
        if trace and dist >= trace[-1]:
            rises += 1
            if rises == 3:
                warnings.warn("flow iteration not contracting", NonContractionWarning, stacklevel=2)
        else:
            rises = 0
        trace.append(dist)
        surv.append(new.survival[-1])
        flow = new
        if dist < tol:
            converged = True
            break
    # flow is the empirical flow of e; e was built from the previous iterate
    return PicardResult(flow, e, np.array(trace), np.array(surv), converged)
