"""Particle solvers for controlled killed McKean-Vlasov diffusions in the weak formulation."""

__version__ = "0.1.0"

from .measures import MeasureFlow, SignedMeasureRepr, WeightedSample  # noqa: E402
from .model import (ControlSpace, CostSpec, DomainSpec, DynamicsSpec, InitialLaw, Scenario,  # noqa: E402
                    controlled_drift, mean_interaction, quadratic_control_cost, validate_scenario)
from .dynamics import ControlField, ParticleEnsemble, reweight, simulate_reference  # noqa: E402
from .pontryagin import SolverOptions, solve  # noqa: E402
