"""Componentwise accurate doubling and density algorithms for Markov-modulated fluid queues."""

from .density import (
    BoundaryMass,
    DensityResult,
    ReturnOperators,
    boundary_mass,
    build_return_operators,
    density_at,
    expm_nonneg,
    stationary_density,
)
from .doubling import (
    ConvergenceDiagnostics,
    DoublingState,
    RiccatiSolution,
    Variant,
    censored_reference_step,
    doubling_step,
    estimate_decay_rate,
    initialize,
    solve_riccati,
)
from .examples import cascading_model, weakly_connected_model
from .exceptions import (
    ConvergenceError,
    FluidQueueError,
    GthError,
    ModelError,
    NumericalError,
    OracleError,
    ParameterError,
    RecurrenceError,
    TripletError,
)
from .gth import (
    GthFactors,
    Side,
    TripletRepresentation,
    gth_factor,
    gth_left_kernel,
    gth_right_kernel,
    gth_solve,
    gth_solve_matrix,
    gth_solve_transposed,
)
from .model import (
    DoublingParameters,
    FluidQueueModel,
    PhaseDistribution,
    Scheme,
    choose_parameters,
    format_model,
    parse_model,
    stationary_phase_distribution,
)
from .oracle import ErrorMetrics, ExtendedSolution, error_metrics, solve_riccati_extended

__version__ = "0.1.0"
