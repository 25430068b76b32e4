//! High-level verification drivers: refit the marginal structural model to
//! simulated data, naively and with stabilised weights, and repeat over
//! replicated datasets to tabulate bias, coverage, and power.

use rand_chacha::ChaCha8Rng;

use super::bootstrap::{bootstrap_ci, BootstrapCi};
use super::glm::{fit_pooled_binary, BinaryLink, FitResult};
use super::person_period::{expand_person_period, InterceptKind, RegTerm, RowOutcome, VarRef};
use super::weights::stabilized_weights;
use crate::engine::{simulate_cohort, EngineOptions};
use crate::record::IndividualRecord;
use crate::rng::{derive_rng, mix_root, StreamRole};
use crate::scenario::{self, CompiledScenario, MsmLink};
use crate::{Error, Result};

/// 97.5% standard-normal quantile, for two-sided 95% intervals.
pub const Z_975: f64 = 1.959963984540054;

/// Canonical signature of a factor product, for deduplication.
fn term_sig(factors: &[VarRef]) -> Vec<u64> {
    let mut sig: Vec<u64> = factors
        .iter()
        .map(|f| match *f {
            VarRef::X(i) => (0u64 << 32) | i as u64,
            VarRef::B(i) => (1u64 << 32) | i as u64,
            VarRef::L(i) => (2u64 << 32) | i as u64,
            VarRef::LLag(i) => (3u64 << 32) | i as u64,
            VarRef::ALag => 4u64 << 32,
            VarRef::A => 5u64 << 32,
            VarRef::K => 6u64 << 32,
        })
        .collect();
    sig.sort_unstable();
    sig
}

fn msm_factor_to_reg(sc: &CompiledScenario, f: scenario::MsmFactor) -> (VarRef, String) {
    match f {
        scenario::MsmFactor::X(i) => (VarRef::X(i), sc.x_names[i].clone()),
        scenario::MsmFactor::ACur => (VarRef::A, "a".into()),
        scenario::MsmFactor::ALag => (VarRef::ALag, "a.lag1".into()),
        scenario::MsmFactor::VisitK => (VarRef::K, "k".into()),
    }
}

/// The working marginal model fitted back to simulated data: per-visit
/// intercepts plus one column per true model term, extended with redundant
/// terms whose true coefficient is zero — visit interactions for the logit
/// family, treatment interactions for the complementary-log-log family —
/// so the refit also verifies that spurious structure is *not* found.
/// Returns the regressors and the true coefficient of each.
pub fn working_model(sc: &CompiledScenario) -> Result<(Vec<RegTerm>, Vec<f64>)> {
    let mut terms = Vec::new();
    let mut truth = Vec::new();
    let mut sigs = Vec::new();
    for (coef, factors) in &sc.msm.terms {
        let mut regs = Vec::with_capacity(factors.len());
        let mut names = Vec::with_capacity(factors.len());
        for &f in factors {
            let (reg, name) = msm_factor_to_reg(sc, f);
            regs.push(reg);
            names.push(name);
        }
        sigs.push(term_sig(&regs));
        terms.push(RegTerm::new(names.join("*"), regs));
        truth.push(*coef);
    }

    let mut push_extra = |factors: Vec<VarRef>, name: String, sigs: &mut Vec<Vec<u64>>| {
        let sig = term_sig(&factors);
        if !sigs.contains(&sig) {
            sigs.push(sig);
            terms.push(RegTerm::new(name, factors));
            truth.push(0.0);
        }
    };
    match sc.msm.link {
        MsmLink::Logit | MsmLink::AdditiveHazard => {
            // Visit interactions for every singleton term.
            let singles: Vec<(VarRef, String)> = sc
                .msm
                .terms
                .iter()
                .filter(|(_, f)| f.len() == 1 && f[0] != scenario::MsmFactor::VisitK)
                .map(|(_, f)| msm_factor_to_reg(sc, f[0]))
                .collect();
            for (reg, name) in singles {
                push_extra(vec![reg, VarRef::K], format!("{name}*k"), &mut sigs);
            }
        }
        MsmLink::Cloglog => {
            // Treatment interactions for every singleton baseline covariate.
            let singles: Vec<(VarRef, String)> = sc
                .msm
                .terms
                .iter()
                .filter(|(_, f)| f.len() == 1 && matches!(f[0], scenario::MsmFactor::X(_)))
                .map(|(_, f)| msm_factor_to_reg(sc, f[0]))
                .collect();
            for (reg, name) in singles {
                push_extra(vec![reg, VarRef::A], format!("{name}*a"), &mut sigs);
            }
        }
    }
    Ok((terms, truth))
}

/// Treatment-model regressors for the stabilised weights. The denominator
/// mirrors the scenario's real treatment model (so it is correctly
/// specified); the numerator keeps only baseline-covariate and treatment-
/// history terms.
pub fn weight_model_terms(sc: &CompiledScenario) -> (Vec<RegTerm>, Vec<RegTerm>) {
    let mut den = Vec::new();
    let mut num = Vec::new();
    for &(_, var) in &sc.treatment.lp.terms {
        let (reg, name) = match var {
            scenario::VarRef::X(i) => (VarRef::X(i), sc.x_names[i].clone()),
            scenario::VarRef::B(i) => (VarRef::B(i), sc.b_names[i].clone()),
            scenario::VarRef::LCur(i) => (VarRef::L(i), sc.l_names[i].clone()),
            scenario::VarRef::LLag(i) => (VarRef::LLag(i), format!("{}.lag1", sc.l_names[i])),
            scenario::VarRef::ALag => (VarRef::ALag, "a.lag1".into()),
            scenario::VarRef::VisitK => (VarRef::K, "k".into()),
        };
        let keep_in_numerator = matches!(
            var,
            scenario::VarRef::X(_) | scenario::VarRef::ALag | scenario::VarRef::VisitK
        );
        den.push(RegTerm::new(name.clone(), vec![reg]));
        if keep_in_numerator {
            num.push(RegTerm::new(name, vec![reg]));
        }
    }
    (den, num)
}

fn outcome_link(sc: &CompiledScenario) -> Result<BinaryLink> {
    match sc.msm.link {
        MsmLink::Logit => Ok(BinaryLink::Logit),
        MsmLink::Cloglog => Ok(BinaryLink::Cloglog),
        MsmLink::AdditiveHazard => Err(Error::Estimation(
            "the verification refit supports logit and complementary-log-log \
             marginal models only"
                .into(),
        )),
    }
}

fn converged(fit: FitResult, what: &str) -> Result<FitResult> {
    if fit.converged {
        Ok(fit)
    } else {
        Err(Error::NonConvergence(format!(
            "{what} stopped after {} iterations without converging",
            fit.iters
        )))
    }
}

/// One dataset's verification refit: naive and weighted fits of the working
/// marginal model, with optional bootstrap intervals for the weighted fit.
#[derive(Clone, Debug)]
pub struct MsmFitReport {
    pub n: usize,
    pub person_periods: usize,
    pub observed_failures: usize,
    /// All design columns (visit intercepts first).
    pub col_names: Vec<String>,
    /// Index of the first model term among the columns.
    pub term_offset: usize,
    pub term_names: Vec<String>,
    /// True coefficient per term.
    pub truth: Vec<f64>,
    pub naive: FitResult,
    pub iptw: FitResult,
    /// Percentile intervals over the full coefficient vector.
    pub bootstrap: Option<BootstrapCi>,
    pub weight_extreme_rows: usize,
}

impl MsmFitReport {
    /// Weighted estimates for the model terms only.
    pub fn iptw_term_estimates(&self) -> &[f64] {
        &self.iptw.coef[self.term_offset..]
    }

    pub fn naive_term_estimates(&self) -> &[f64] {
        &self.naive.coef[self.term_offset..]
    }
}

fn iptw_pipeline(
    sc: &CompiledScenario,
    cohort: &[IndividualRecord],
    terms: &[RegTerm],
    den: &[RegTerm],
    num: &[RegTerm],
    link: BinaryLink,
) -> Result<FitResult> {
    let table = expand_person_period(
        cohort,
        sc,
        terms,
        InterceptKind::PerVisit,
        RowOutcome::Failure,
    )?;
    let sw = stabilized_weights(cohort, sc, den, num)?;
    converged(
        fit_pooled_binary(&table, link, Some(&sw.weights))?,
        "weighted outcome model",
    )
}

/// Refit the working marginal model to an existing cohort. `bootstrap_b` of
/// zero skips the bootstrap; `resample_seed` feeds its resampling stream.
pub fn fit_cohort_msm(
    sc: &CompiledScenario,
    cohort: &[IndividualRecord],
    bootstrap_b: usize,
    resample_seed: u64,
) -> Result<MsmFitReport> {
    let link = outcome_link(sc)?;
    let (terms, truth) = working_model(sc)?;
    let (den, num) = weight_model_terms(sc);

    let table = expand_person_period(
        cohort,
        sc,
        &terms,
        InterceptKind::PerVisit,
        RowOutcome::Failure,
    )?;
    let naive = converged(
        fit_pooled_binary(&table, link, None)?,
        "unweighted outcome model",
    )?;
    let sw = stabilized_weights(cohort, sc, &den, &num)?;
    if sw.weights.len() != table.n_rows() {
        return Err(Error::Estimation(format!(
            "treatment and outcome expansions disagree: {} vs {} rows",
            sw.weights.len(),
            table.n_rows()
        )));
    }
    let iptw = converged(
        fit_pooled_binary(&table, link, Some(&sw.weights))?,
        "weighted outcome model",
    )?;

    let bootstrap = if bootstrap_b > 0 {
        let mut rng: ChaCha8Rng = derive_rng(resample_seed, 0, StreamRole::Resample, 0);
        Some(bootstrap_ci(cohort, bootstrap_b, &mut rng, |resampled| {
            iptw_pipeline(sc, resampled, &terms, &den, &num, link).map(|fit| fit.coef)
        })?)
    } else {
        None
    };

    let term_offset = sc.visits();
    Ok(MsmFitReport {
        n: cohort.len(),
        person_periods: table.n_rows(),
        observed_failures: table.y.iter().filter(|&&y| y != 0.0).count(),
        col_names: table.col_names.clone(),
        term_offset,
        term_names: terms.iter().map(|t| t.name.clone()).collect(),
        truth,
        naive,
        iptw,
        bootstrap,
        weight_extreme_rows: sw.extreme_rows,
    })
}

/// Simulate one cohort and refit the marginal model to it.
pub fn run_msm_validation(
    sc: &CompiledScenario,
    n: usize,
    root_seed: u64,
    bootstrap_b: usize,
) -> Result<MsmFitReport> {
    let cohort = simulate_cohort(sc, n, root_seed, &EngineOptions::default())?;
    fit_cohort_msm(sc, &cohort, bootstrap_b, root_seed)
}

/// Aggregated behaviour of one model term across study replicates.
#[derive(Clone, Debug)]
pub struct StudyRow {
    pub name: String,
    pub truth: f64,
    pub mean_naive: f64,
    pub mean_iptw: f64,
    pub bias_iptw: f64,
    /// Empirical standard deviation of the weighted estimates.
    pub emp_sd: f64,
    pub mean_sandwich_se: f64,
    /// Fraction of replicates whose sandwich interval covers the truth.
    pub coverage_sandwich: f64,
    /// Fraction rejecting a zero coefficient by the sandwich interval.
    pub power_sandwich: f64,
    pub coverage_bootstrap: Option<f64>,
    pub power_bootstrap: Option<f64>,
}

/// The replicated simulate-and-refit experiment.
#[derive(Clone, Debug)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub n: usize,
    pub replicates_requested: usize,
    pub replicates_used: usize,
    pub failed_replicates: usize,
    pub bootstrap_b: usize,
}

/// Monte Carlo standard error of an estimated proportion.
pub fn proportion_mc_se(p: f64, replicates: usize) -> f64 {
    if replicates == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / replicates as f64).sqrt()
    }
}

const STUDY_TAG: u64 = 0x7374_7564_79; // "study"

/// Repeat simulate → naive fit → weighted fit (→ bootstrap) over
/// independently seeded replicates and tabulate bias, coverage, and power
/// per model term. Replicates whose fit fails (for example through
/// separation in a small sample) are excluded and counted; more than 10%
/// of them invalidates the table.
pub fn run_sim_study(
    sc: &CompiledScenario,
    n: usize,
    replicates: usize,
    bootstrap_b: usize,
    root_seed: u64,
) -> Result<StudyTable> {
    if replicates == 0 {
        return Err(Error::Estimation("a study needs at least one replicate".into()));
    }
    let (terms, truth) = working_model(sc)?;
    let p = terms.len();
    let mut naive_est = vec![Vec::with_capacity(replicates); p];
    let mut iptw_est = vec![Vec::with_capacity(replicates); p];
    let mut sand_se = vec![Vec::with_capacity(replicates); p];
    let mut boot_lo = vec![Vec::with_capacity(replicates); p];
    let mut boot_hi = vec![Vec::with_capacity(replicates); p];
    let mut failed = 0usize;

    for rep in 0..replicates {
        let rep_root = mix_root(root_seed, &[STUDY_TAG, rep as u64]);
        match run_msm_validation(sc, n, rep_root, bootstrap_b) {
            Ok(report) => {
                let off = report.term_offset;
                let sse = report.iptw.sandwich_se();
                for j in 0..p {
                    naive_est[j].push(report.naive.coef[off + j]);
                    iptw_est[j].push(report.iptw.coef[off + j]);
                    sand_se[j].push(sse[off + j]);
                    if let Some(ci) = &report.bootstrap {
                        boot_lo[j].push(ci.lower[off + j]);
                        boot_hi[j].push(ci.upper[off + j]);
                    }
                }
            }
            Err(e) => {
                failed += 1;
                log::warn!("study replicate {rep} failed: {e}");
            }
        }
    }
    let used = replicates - failed;
    if failed * 10 > replicates || used == 0 {
        return Err(Error::UnreliableInterval(format!(
            "{failed} of {replicates} study replicates failed"
        )));
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = Vec::with_capacity(p);
    for j in 0..p {
        let m_iptw = mean(&iptw_est[j]);
        let emp_sd = crate::stats::sample_sd(&iptw_est[j]);
        let covers = iptw_est[j]
            .iter()
            .zip(&sand_se[j])
            .filter(|(e, s)| (truth[j] - **e).abs() <= Z_975 * **s)
            .count();
        let rejects = iptw_est[j]
            .iter()
            .zip(&sand_se[j])
            .filter(|(e, s)| e.abs() > Z_975 * **s)
            .count();
        let (coverage_bootstrap, power_bootstrap) = if bootstrap_b > 0 {
            let c = boot_lo[j]
                .iter()
                .zip(&boot_hi[j])
                .filter(|(lo, hi)| **lo <= truth[j] && truth[j] <= **hi)
                .count();
            let r = boot_lo[j]
                .iter()
                .zip(&boot_hi[j])
                .filter(|(lo, hi)| **lo > 0.0 || **hi < 0.0)
                .count();
            (
                Some(c as f64 / used as f64),
                Some(r as f64 / used as f64),
            )
        } else {
            (None, None)
        };
        rows.push(StudyRow {
            name: terms[j].name.clone(),
            truth: truth[j],
            mean_naive: mean(&naive_est[j]),
            mean_iptw: m_iptw,
            bias_iptw: m_iptw - truth[j],
            emp_sd,
            mean_sandwich_se: mean(&sand_se[j]),
            coverage_sandwich: covers as f64 / used as f64,
            power_sandwich: rejects as f64 / used as f64,
            coverage_bootstrap,
            power_bootstrap,
        });
    }
    Ok(StudyTable {
        rows,
        n,
        replicates_requested: replicates,
        replicates_used: used,
        failed_replicates: failed,
        bootstrap_b,
    })
}
