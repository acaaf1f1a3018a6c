"""Stochastic bilevel optimisation with linear equality constraints at both levels."""
from .errors import (
    AipodError,
    CapabilityError,
    ConditioningError,
    InfeasibleError,
    InputError,
    RunError,
)
from .federated import ClientState, CommLog, fed_w_hvp, run_fed_e2aipod, run_fed_eaipod
from .geometry import (
    AffineConstraint,
    SubspaceDecomposition,
    check_feasible,
    consensus_constraints,
    decompose,
    project,
    server_average,
    weighted_norm_sq,
)
from .harness import ExperimentConfig, emit_config, parse_config, run_experiment, sweep, verify
from .hypergrad import (
    HypergradSample,
    NeumannConfig,
    closed_form_ustar,
    estimate_hf,
    estimate_w,
    exact_implicit_jacobian,
    exact_upper_gradient,
    stationarity,
)
from .problems import (
    BilevelProblem,
    NoiseModel,
    ProblemMetadata,
    ProblemSpec,
    build_federated_quadratic,
    build_problem,
    build_quadratic,
    build_synthetic,
    exact_lower_solution,
)
from .rng import RoundDraws, SampleToken, Stream
from .solvers import (
    Counters,
    IterateState,
    MetricRow,
    RunTrace,
    SolverConfig,
    e2aipod_medium,
    eaipod_lower,
    lower_pgd,
    run_aipod,
    run_e2aipod,
    run_eaipod,
    run_solver,
)

__all__ = [
    "AffineConstraint",
    "AipodError",
    "BilevelProblem",
    "CapabilityError",
    "ClientState",
    "CommLog",
    "ConditioningError",
    "Counters",
    "ExperimentConfig",
    "HypergradSample",
    "InfeasibleError",
    "InputError",
    "IterateState",
    "MetricRow",
    "NeumannConfig",
    "NoiseModel",
    "ProblemMetadata",
    "ProblemSpec",
    "RoundDraws",
    "RunError",
    "RunTrace",
    "SampleToken",
    "SolverConfig",
    "Stream",
    "SubspaceDecomposition",
    "build_federated_quadratic",
    "build_problem",
    "build_quadratic",
    "build_synthetic",
    "check_feasible",
    "closed_form_ustar",
    "consensus_constraints",
    "decompose",
    "e2aipod_medium",
    "eaipod_lower",
    "emit_config",
    "estimate_hf",
    "estimate_w",
    "exact_implicit_jacobian",
    "exact_lower_solution",
    "exact_upper_gradient",
    "fed_w_hvp",
    "lower_pgd",
    "parse_config",
    "project",
    "run_aipod",
    "run_e2aipod",
    "run_eaipod",
    "run_experiment",
    "run_fed_e2aipod",
    "run_fed_eaipod",
    "run_solver",
    "server_average",
    "stationarity",
    "sweep",
    "verify",
    "weighted_norm_sq",
]

__version__ = "0.1.0"
