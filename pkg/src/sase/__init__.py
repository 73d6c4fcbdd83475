"""Synchronization-aware PMU state estimation for power distribution grids.

The package models a per-unit AC network, linearizes its power-flow
equations at a feasible operating point, simulates noisy and
de-synchronized PMU measurement streams, and runs a Kalman estimator
that tracks demand deviations jointly with per-PMU clock skew and
offset, alongside desync-blind and oracle baselines and a Monte-Carlo
evaluation harness.
"""

from .analysis import (
    ExperimentResult,
    ExperimentScenario,
    TwoNodeParams,
    empirical_armse,
    greedy_placement,
    run_experiment,
    theoretical_armse,
    tve,
    two_node_limits,
    two_node_posterior,
)
from .estimator import (
    FilterState,
    GainSchedule,
    StateSpaceModel,
    VoltageEstimate,
    build_state_space,
    offline_schedule,
    recover_voltages,
    resync,
    sase_step,
)
from .linearize import LinearModel, apply_sensitivity, bracket, rotation_matrix, tangent_matrix
from .measure import (
    ClockError,
    MeasurementConfig,
    Placement,
    PmuFrame,
    desync_phase,
    draw_clock,
    draw_demand_truth,
    simulate_pmu_stream,
    tau,
)
from .network import (
    AdmittanceMatrix,
    Branch,
    Bus,
    Network,
    NetworkFormatError,
    build_admittance,
    bundled_feeder6,
    import_matpower_case,
    parse_network,
    serialize_network,
)
from .powerflow import GridState, OperatingPoint, PowerFlowError, pf_residual, solve_power_flow

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
