//! Simulate longitudinal survival data that are exactly compatible with a
//! user-specified marginal structural model (MSM), and fit the model back
//! with inverse-probability-of-treatment weights to demonstrate it.
//!
//! The crate has four layers:
//!
//! * [`scenario`] declares the data-generating law: baseline covariates,
//!   time-varying confounders, a treatment process, a risk score that orders
//!   individuals by frailty, and the target MSM (discrete-time logistic,
//!   piecewise-constant proportional hazard, or additive hazard, optionally
//!   read as a continuous-time model).
//! * [`engine`] generates cohorts. The matched-pool engine needs no analytic
//!   knowledge of the risk-score distribution: it ranks each individual
//!   inside a pool of matches that share the same baseline covariates and
//!   treatment path. The known-CDF engine consumes pre-estimated quantile
//!   grids from [`risk_cdf`]. [`continuous_time`] generates event-history
//!   data compatible with a continuous-time MSM.
//! * [`numeric`] holds the copula and ranking kernels shared by all engines,
//!   plus the discrete-score variants (interval-uniform and odds-ratio
//!   table couplings).
//! * [`estimate`] expands cohorts to person-period form, fits pooled binary
//!   models by IRLS, computes stabilized treatment weights, cluster-robust
//!   covariance and percentile bootstrap intervals, and drives the
//!   replication studies.
//!
//! Everything is deterministic given a root seed: each individual draws from
//! independent named substreams (see [`rng`]), so cohorts are byte-identical
//! across worker-thread counts and engine variants that share draws.

pub mod continuous_time;
pub mod csvio;
pub mod engine;
pub mod estimate;
pub mod numeric;
pub mod record;
pub mod risk_cdf;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod validate;

pub use continuous_time::{
    parse_ct_scenario, simulate_ct_cohort, CompiledCtScenario, CtIndividualRecord, CtScenarioSpec,
    StepPath,
};
pub use engine::{simulate_cohort, simulate_potential_arm, EngineOptions};
pub use estimate::{fit_cohort_msm, run_msm_validation, run_sim_study, MsmFitReport, StudyTable};
pub use record::IndividualRecord;
pub use scenario::{builtin_scenario, parse_scenario, CompiledScenario, MsmLink, ScenarioSpec};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Scenario schema or validation failure (bad reference, dimension
    /// mismatch, parameter out of range).
    #[error("scenario: {0}")]
    Scenario(String),

    /// Requested built-in scenario name does not exist.
    #[error("unknown preset {0:?}; run `msmsim presets` for the list")]
    UnknownPreset(String),

    /// Numeric-domain violation (probability outside (0,1), correlation
    /// outside (-1,0], quantile of a degenerate distribution).
    #[error("domain: {0}")]
    Domain(String),

    /// A hazard evaluated non-positive where a positive value is required
    /// (additive-hazard MSM, continuous-time intensities).
    #[error("invalid hazard: {0}")]
    InvalidHazard(String),

    /// Every match in a pool died before the sampled individual's outcome
    /// was resolved. Retry with a larger pool size.
    #[error("match pool exhausted: {0}")]
    PoolExhausted(String),

    /// No quantile grid was estimated for a requested stratum/regime key.
    #[error("missing risk-score grid: {0}")]
    MissingGrid(String),

    /// The known-CDF planner cannot enumerate the scenario (continuous
    /// baseline covariates, non-binary treatment, or too many strata).
    #[error("grid planning: {0}")]
    Plan(String),

    /// Model fitting failed (rank deficiency, separation, non-convergence).
    #[error("estimation: {0}")]
    Estimation(String),

    /// Too many bootstrap replicates failed for the interval to be trusted.
    #[error("unreliable interval: {0}")]
    UnreliableInterval(String),

    /// Iterative proportional fitting did not reach the requested tolerance.
    #[error("table coupling did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
