"""Policy iteration and online learning for graphical games on linear fleets."""

from .dynamics import (
    DisturbanceModel,
    FleetModel,
    LinearPolicy,
    ProbeSpec,
    TrajectoryLog,
    simulate,
)
from .game import (
    COOPERATIVE,
    NONCOOPERATIVE,
    GameWeights,
    ValueKernel,
    check_attenuation_coop,
    check_attenuation_noncoop,
    l2_gain_check,
    saddle_gap,
    stage_cost,
)
from .graph import GraphTopology, build_topology, neighborhood_error
from .online import LearnerState, initial_learner_state, run_online
from .pi_solver import (
    QKernel,
    policy_eval_lsq,
    riccati_oracle_single_agent,
    run_pi_coop,
    run_pi_noncoop,
)

__all__ = [
    "COOPERATIVE",
    "NONCOOPERATIVE",
    "DisturbanceModel",
    "FleetModel",
    "GameWeights",
    "GraphTopology",
    "LearnerState",
    "LinearPolicy",
    "ProbeSpec",
    "QKernel",
    "TrajectoryLog",
    "ValueKernel",
    "build_topology",
    "check_attenuation_coop",
    "check_attenuation_noncoop",
    "initial_learner_state",
    "l2_gain_check",
    "neighborhood_error",
    "policy_eval_lsq",
    "riccati_oracle_single_agent",
    "run_online",
    "run_pi_coop",
    "run_pi_noncoop",
    "saddle_gap",
    "simulate",
    "stage_cost",
]

__version__ = "0.1.0"
