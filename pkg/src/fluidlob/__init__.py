"""Simulator and numerical-analysis toolkit for a multi-venue order-routing
queueing model: exact event-driven simulation of the rescaled discrete system,
integration of its nonlinear fluid limit, stationary-equilibrium solving, and
local/global stability certification.
"""

from .errors import (
    AssumptionError,
    BracketError,
    ConfigError,
    IntegrationError,
    SingularityError,
    StepInstabilityError,
)
from .fluid import (
    FluidTrajectory,
    IntegratorConfig,
    default_integrator_config,
    fluid_rhs,
    integrate,
    workload_rhs,
)
from .model import (
    AssumptionReport,
    DeterministicSize,
    ExponentialType,
    GeometricSize,
    HalfNormalType,
    ModelConfig,
    RoutingBands,
    SizeDistribution,
    TabulatedSize,
    TabulatedType,
    TypeDistribution,
    check_assumptions,
    compute_bands,
    compute_kappa,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .routing import (
    QueueState,
    chi,
    chi_derivative,
    expected_delays,
    market_rates,
    mu_gradient,
    route,
)
from .sim import ConvergenceTable, SimConfig, SimPath, replicate, simulate, sup_distance
from .stability import (
    Equilibrium,
    GlobalStabilityReport,
    LocalStabilityReport,
    SpectrumReport,
    det_shifted,
    global_stability_experiment,
    jacobian,
    local_stability_experiment,
    solve_equilibrium,
    solve_workload_star,
    spectrum,
)

__version__ = "0.1.0"
