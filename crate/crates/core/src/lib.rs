//! Monte Carlo engine for backward stochastic differential equations driven
//! by time-changed Lévy noise.
//!
//! The noise is a conditional Brownian measure `B` plus a compensated doubly
//! stochastic Poisson field `H̃` whose intensities `λ = (λ^B, λ^H)` are
//! themselves random. BSDEs are solved by a regression-based Picard scheme;
//! closed forms for linear BSDEs and mean-variance control serve as oracles.

pub mod bsde;
pub mod config;
pub mod control;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod intensity;
pub mod levy;
pub mod linear;
pub mod noise;
pub mod regression;
pub mod rng;
pub mod stats;
pub mod stochint;

pub use config::{load_config, parse_config, parse_config_for, ExperimentConfig, ExperimentKind};
pub use error::{ConfigIssue, Error, Result};
pub use grid::{make_grid, TimeGrid};
pub use intensity::{simulate_intensity, ComponentModel, IntensityModel, IntensityPath};
pub use levy::{levy_second_moment, Atom, LevyMeasure};
pub use noise::{
    doubly_stochastic_moments, empirical_char_function, simulate_noise, CharFunctionEstimate,
    MomentEstimate, NoiseBatch, NoiseComponent, NoiseScenario, NoiseStreams,
};
pub use stochint::{
    build_predictable, factor_check, i_norm_squared, integrate, isometry_check, FactorReport,
    Integrand, IsometryReport, PrefixView,
};
pub use regression::{
    conditional_expectation, Feature, Filtration, PhiEstimator, Projector, RegressionSpec,
    StateMatrix,
};
pub use bsde::{
    picard_contraction_probe, solve_backward, validate_standard_parameters, BackwardSolver,
    BsdeSolution, ContractionProbe, Driver, DriverArgs, Iterate, SolverDiagnostics,
    SolverSettings, StandardParameterReport, TerminalCondition,
};
pub use linear::{
    comparison_harness, gamma_process, linear_solution, ComparisonReport, Field,
    LinearCoefficients, OracleMode, StructuralDriver,
};
pub use control::{
    adjoint_solve, coefficient_field_f, coefficient_field_g, maximum_principle_check,
    mv_coefficients, mv_control_f, mv_control_g, mv_rule, simulate_state, standard_challengers,
    utility_foc_report, utility_foc_residual, CoefficientField, ControlContext, ControlProblem, ControlRule,
    MaxPrincipleReport, MeanVarianceCoefficients, MeanVarianceModel, PerformanceEstimate, Point,
    StatePaths, Utility, UtilityFocReport,
};
pub use experiment::{exit_code_for, run_experiment, Check, Outcome};
