//! Percentile bootstrap over individuals (clusters).
//!
//! Each replicate resamples whole individuals with replacement and reruns
//! the entire pipeline — weight estimation included — so the intervals
//! reflect the uncertainty in the weights as well as in the outcome fit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::record::IndividualRecord;
use crate::stats::quantile;
use crate::{Error, Result};

/// Percentile intervals over the converged bootstrap replicates.
#[derive(Clone, Debug)]
pub struct BootstrapCi {
    /// 2.5th percentile per coefficient.
    pub lower: Vec<f64>,
    /// 97.5th percentile per coefficient.
    pub upper: Vec<f64>,
    /// Replicates whose pipeline failed (excluded from the percentiles).
    pub failed: usize,
    /// Replicates that contributed.
    pub used: usize,
}

/// Run `refit` on `b` cluster resamples of `cohort` and return per-
/// coefficient 2.5/97.5 percentile intervals. Resampled individuals get
/// fresh ids (their position in the replicate) so repeated draws of one
/// individual count as distinct clusters. Failing replicates are excluded;
/// more than 10% of them is reported as an unreliable interval.
pub fn bootstrap_ci<F>(
    cohort: &[IndividualRecord],
    b: usize,
    rng: &mut ChaCha8Rng,
    refit: F,
) -> Result<BootstrapCi>
where
    F: Fn(&[IndividualRecord]) -> Result<Vec<f64>>,
{
    if b < 100 {
        return Err(Error::Estimation(format!(
            "percentile intervals need at least 100 bootstrap replicates, got {b}"
        )));
    }
    if cohort.is_empty() {
        return Err(Error::Estimation("cannot bootstrap an empty cohort".into()));
    }
    let n = cohort.len();
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut failed = 0usize;
    let mut resampled: Vec<IndividualRecord> = Vec::with_capacity(n);
    for _ in 0..b {
        resampled.clear();
        for pos in 0..n {
            let mut rec = cohort[rng.random_range(0..n)].clone();
            rec.id = pos as u64;
            resampled.push(rec);
        }
        match refit(&resampled) {
            Ok(coef) => draws.push(coef),
            Err(_) => failed += 1,
        }
    }
    percentile_ci(&draws, failed, b)
}

/// Assemble the 2.5/97.5 percentile interval from per-replicate coefficient
/// draws, refusing when more than 10% of the replicates failed.
pub(crate) fn percentile_ci(
    draws: &[Vec<f64>],
    failed: usize,
    b: usize,
) -> Result<BootstrapCi> {
    if failed * 10 > b {
        return Err(Error::UnreliableInterval(format!(
            "{failed} of {b} bootstrap replicates failed"
        )));
    }
    let used = draws.len();
    let p = draws
        .first()
        .ok_or_else(|| Error::UnreliableInterval("all bootstrap replicates failed".into()))?
        .len();
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    let mut column = vec![0.0; used];
    for j in 0..p {
        for (i, d) in draws.iter().enumerate() {
            column[i] = d[j];
        }
        lower.push(quantile(&column, 0.025));
        upper.push(quantile(&column, 0.975));
    }
    Ok(BootstrapCi {
        lower,
        upper,
        failed,
        used,
    })
}
