"""Counterfactual root cause analysis for discretized dynamical systems.

Fit a dynamic structural causal model on normal data, abduct the exogenous
noise of a faulty trajectory, sample counterfactual trajectories under noise
and structural interventions, and rank (node, time) candidates.
"""

from cfrca.errors import (
    BoundsError,
    CapacityError,
    DataError,
    DivergenceError,
    ShapeError,
)
from cfrca.graph import NodeId, SummaryGraph, GraphPerturbation, parents, perturb, topological_schedule
from cfrca.dynamics import (
    AbductedNoise,
    DynamicScm,
    Intervention,
    NoiseModel,
    Trajectory,
    abduct,
    counterfactual_sample,
    inject,
    simulate,
    treatment_effect,
)
from cfrca.models import (
    FitResult,
    LinearTransition,
    NodeFit,
    ResidualMlp,
    TrainConfig,
    fit,
    fit_fm,
    fit_scm,
)
from cfrca.scoring import (
    Band,
    Corridor,
    LogLik,
    ScoreTable,
    ZScore,
    approx_shapley,
    exact_shapley_oracle,
    node_level_scores,
    rank,
)
from cfrca.pipeline import MethodVariant, diagnose

__version__ = "0.1.0"
