//! Per-individual simulation output.

/// Outcome of censoring resolution for one individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensorReason {
    /// Failure observed before any censoring.
    None,
    /// Random censoring cut the follow-up short.
    Random,
    /// Alive and uncensored at the end of the scheduled visits.
    Administrative,
}

impl CensorReason {
    pub fn as_str(self) -> &'static str {
        match self {
            CensorReason::None => "none",
            CensorReason::Random => "random",
            CensorReason::Administrative => "administrative",
        }
    }
}

/// One simulated individual: baseline covariates, the confounder and
/// treatment path over the visits they were alive for, and the outcome.
///
/// Visit convention: visits are indexed `0..visits`; failure is assessed
/// after each visit, so a failure "at visit k+1" means death in the interval
/// `(k, k+1]`. `l` is stored flat, `n_l` values per attended visit.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub id: u64,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    /// Flattened confounder path: `l[k * n_l + j]` for attended visits.
    pub l: Vec<f64>,
    /// Treatment at each attended visit; its length is the number of visits
    /// the individual was alive at.
    pub a: Vec<f64>,
    /// First visit index with the failure indicator off (1-based interval
    /// endpoint, in `1..=visits`); `None` if the individual survived all
    /// scheduled visits.
    pub failure_visit: Option<u32>,
    /// Exact failure time inside the interval when the MSM is read in
    /// continuous time; equals `failure_visit` otherwise.
    pub failure_time: Option<f64>,
    /// Raw exponential censoring draw (uncapped); `None` without censoring.
    pub censor_draw: Option<f64>,
    /// The individual's own rank-based risk-score CDF values, one per
    /// decided visit, when the engine was asked to record them.
    pub risk_quantiles: Vec<f64>,
    /// Match-pool restarts this individual triggered.
    pub restarts: u32,
}

impl IndividualRecord {
    /// Number of visits the individual attended (was alive at).
    pub fn visits_attended(&self) -> usize {
        self.a.len()
    }

    /// Alive at visit `k` (eligible to attend it)?
    pub fn alive_at(&self, k: usize) -> bool {
        match self.failure_visit {
            Some(fv) => (k as u32) < fv,
            None => true,
        }
    }

    /// Confounder values at an attended visit.
    pub fn l_at(&self, k: usize, n_l: usize) -> &[f64] {
        &self.l[k * n_l..(k + 1) * n_l]
    }

    /// Observed follow-up under the scenario's censoring: returns
    /// `(exit time, event observed, censor reason)` with the administrative
    /// horizon at `visits`.
    pub fn observed_exit(&self, visits: usize) -> (f64, bool, CensorReason) {
        let horizon = visits as f64;
        let censor = self
            .censor_draw
            .map(|c| c.min(horizon))
            .unwrap_or(horizon);
        match self.failure_time {
            Some(t) if t <= censor => (t, true, CensorReason::None),
            _ => {
                let reason = if censor < horizon {
                    CensorReason::Random
                } else {
                    CensorReason::Administrative
                };
                (censor, false, reason)
            }
        }
    }
}
