"""Simulation and verification toolkit for diffusions under evolving metrics.

The package builds Brownian-type paths whose generator is the metric
Laplacian of a time-dependent geometry plus a drift, carries damped frame
transports along them, and turns the resulting derivative estimates into
checkable gradient, entropy and coupling statements with Monte Carlo error
bars.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigInvalid,
    CutLocusAmbiguity,
    DegenerateFrame,
    DegenerateInterval,
    FrameNotOrthonormal,
    GeomflowError,
    HorizonExceeded,
    InsufficientSamples,
    MissingGradient,
    NestedBudgetExceeded,
    NoMinimizer,
    NoSolution,
    NonPositiveField,
    FieldBelowOne,
    NumericalBlowup,
    OffManifold,
    RadiusTooLarge,
    SignalBelowNoise,
    StencilOutOfDomain,
)
from .flows import (
    CurvatureBound,
    DriftField,
    MetricFlow,
    ScaleSchedule,
    custom_drift,
    euclidean_flow,
    exp_scale,
    hyperbolic_flow,
    linear_radial_drift,
    linear_scale,
    sphere_flow,
    sphere_ricci_flow,
    static_scale,
    torus_flow,
    torus_uniform_exp_flow,
    zero_drift,
)
from .frame_sde import FramePoint, PathSample, horizontal_step, initial_state, simulate_path
from .montecarlo import Estimate, estimate_mean
from .rng import NoiseStream
from .coupling import (
    CoupledPair,
    CouplingEnsemble,
    CouplingPath,
    RadialPull,
    couple_step,
    empirical_rho_drift,
    index_form,
    rho_drift_bound,
    simulate_coupling,
    start_pair,
    wasserstein_upper,
)
from .gradient import (
    GradientEstimate,
    KolmogorovReport,
    RecoveryResult,
    bismut_integrated,
    bismut_local,
    bismut_pathwise,
    custom_profile,
    generator_values,
    kolmogorov_residual,
    linear_profile,
    recover_curvature_entropy,
    recover_curvature_grad,
    recover_curvature_variance,
    semigroup,
)
from .inequalities import (
    DEFAULT_MC,
    GrowthReport,
    HyperboundConfig,
    MatrixEntry,
    MCConfig,
    NonexplosionReport,
    NonexplosionSpec,
    Verdict,
    builtin_matrix,
    grigoryan_integral,
    nonexplosion_check,
    solve_q_relation,
    verify_contraction,
    verify_entropy_bound,
    verify_gradient_inequality,
    verify_harnack,
    verify_hyperbound,
    verify_log_harnack,
    verify_reverse_bound,
)
from .config import (
    SCHEMA_VERSION,
    DriftSpec,
    ExperimentConfig,
    FlowSpec,
    MCSpec,
    OutputSpec,
    TaskSpec,
    emit_config,
    parse_config,
    with_overrides,
    write_config,
)
from .report import (
    REPORT_VERSION,
    ReportBundle,
    emit_report,
    run_experiment,
    svg_line_plot,
)

__all__ = [
    "__version__",
    "GeomflowError",
    "ConfigInvalid",
    "HorizonExceeded",
    "OffManifold",
    "CutLocusAmbiguity",
    "DegenerateFrame",
    "FrameNotOrthonormal",
    "MissingGradient",
    "NumericalBlowup",
    "RadiusTooLarge",
    "NestedBudgetExceeded",
    "SignalBelowNoise",
    "NonPositiveField",
    "FieldBelowOne",
    "NoSolution",
    "NoMinimizer",
    "StencilOutOfDomain",
    "DegenerateInterval",
    "InsufficientSamples",
    "ScaleSchedule",
    "DriftField",
    "CurvatureBound",
    "MetricFlow",
    "static_scale",
    "linear_scale",
    "exp_scale",
    "zero_drift",
    "linear_radial_drift",
    "custom_drift",
    "euclidean_flow",
    "sphere_flow",
    "sphere_ricci_flow",
    "hyperbolic_flow",
    "torus_flow",
    "torus_uniform_exp_flow",
    "FramePoint",
    "PathSample",
    "initial_state",
    "horizontal_step",
    "simulate_path",
    "NoiseStream",
    "Estimate",
    "estimate_mean",
    "CoupledPair",
    "CouplingEnsemble",
    "CouplingPath",
    "RadialPull",
    "start_pair",
    "couple_step",
    "simulate_coupling",
    "index_form",
    "rho_drift_bound",
    "empirical_rho_drift",
    "wasserstein_upper",
    "GradientEstimate",
    "KolmogorovReport",
    "RecoveryResult",
    "semigroup",
    "bismut_pathwise",
    "bismut_integrated",
    "bismut_local",
    "linear_profile",
    "custom_profile",
    "generator_values",
    "kolmogorov_residual",
    "recover_curvature_grad",
    "recover_curvature_variance",
    "recover_curvature_entropy",
    "MCConfig",
    "DEFAULT_MC",
    "Verdict",
    "HyperboundConfig",
    "GrowthReport",
    "NonexplosionSpec",
    "NonexplosionReport",
    "MatrixEntry",
    "verify_gradient_inequality",
    "verify_entropy_bound",
    "verify_reverse_bound",
    "verify_harnack",
    "verify_log_harnack",
    "verify_hyperbound",
    "verify_contraction",
    "solve_q_relation",
    "grigoryan_integral",
    "nonexplosion_check",
    "builtin_matrix",
    "SCHEMA_VERSION",
    "DriftSpec",
    "ExperimentConfig",
    "FlowSpec",
    "MCSpec",
    "OutputSpec",
    "TaskSpec",
    "emit_config",
    "parse_config",
    "with_overrides",
    "write_config",
    "REPORT_VERSION",
    "ReportBundle",
    "emit_report",
    "run_experiment",
    "svg_line_plot",
]
