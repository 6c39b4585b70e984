"""Particle-based multilevel Monte Carlo for diffusively scaled kinetic equations."""

from .kinetics import (
    ContractViolationError,
    InvalidParameterError,
    ModelParams,
    ScaledParams,
    VelocityDist,
    collision_dominance_holds,
    sample_unit_velocity,
    scaled_params,
)
from .scheme import ParticleState, StepDraws, ap_step, init_particle, simulate_path
from .coupling import (
    coarse_collision_and_velocity,
    couple_u,
    couple_xi,
    simulate_coupled_ensemble,
    simulate_coupled_pair,
)
from .estimators import (
    EstimatorStats,
    QoiKind,
    difference_estimate,
    merge_stats,
    qoi_eval,
    single_level_estimate,
)
from .mlmc import (
    LevelSpec,
    MlmcConfig,
    MlmcReport,
    Strategy,
    build_levels,
    classical_equivalent_cost,
    run_mlmc,
    sample_counts,
)
from .analysis import (
    AnalysisPoint,
    RateFit,
    brownian_diff_variance,
    coarse_level_threshold,
    fit_convergence_rates,
    leading_order_variance,
    transport_diff_variance,
    variance_bound,
    velocity_diff_variance,
)

__version__ = "0.1.0"
