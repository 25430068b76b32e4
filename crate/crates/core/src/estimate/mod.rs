//! Estimation harness: person-period expansion, pooled binary regression,
//! stabilised treatment weights, cluster bootstrap, and the replicated
//! verification studies built on top of them.

mod bootstrap;
mod drivers;
mod glm;
mod person_period;
mod weights;

pub use bootstrap::{bootstrap_ci, BootstrapCi};
pub use drivers::{
    fit_cohort_msm, proportion_mc_se, run_msm_validation, run_sim_study, weight_model_terms,
    working_model, MsmFitReport, StudyRow, StudyTable, Z_975,
};
pub use glm::{fit_pooled_binary, sandwich_variance, BinaryLink, FitResult};
pub use person_period::{
    expand_person_period, InterceptKind, PersonPeriodTable, RegTerm, RowOutcome, VarRef,
};
pub use weights::{stabilized_weights, StabilizedWeights, EXTREME_PROB};
