//! Outer-level drivers: projected smoothed descent against an exact noisy
//! oracle or against estimated hypergradients, the baselines, and the
//! comparator-sequence measurements.

pub mod estimation;
pub mod oracle;
pub mod project;
pub mod unrolled;
pub mod variation;

pub use estimation::{
    run_estimation_mode, run_fbo_baseline, EstimationConfig, EstimationRun, ExactLinearEstimator,
    FunctionalEstimator, ProbeConfig, ProbeRow, RoundEstimate, RoundEstimator,
};
pub use oracle::{
    run_oracle_mode, AnalyticProblem, DriftingQuadratic, OracleRun, OracleSpec, TheoremConstants,
};
pub use project::{project, Constraint, OuterParams};
pub use unrolled::{unrolled_hypergradient, UnrolledEstimator};
pub use variation::{
    h2t_term, lambda_grid, linear_reduction_check, measure_v1t, measure_v1t_regression,
    parametric_hypergradient, LinearReduction, McVariation,
};
