//! Cohort generation engines.
//!
//! Both discrete-time engines walk the same causal order per visit:
//! confounders, treatment, risk score, rank-to-uniform transform, copula
//! draw, failure indicator. They differ in how the risk score's conditional
//! CDF is obtained: the matched engine ranks the individual inside a pool of
//! matches that share baseline `x` and treatment path, while the known-CDF
//! engine looks the score up in pre-estimated quantile grids.

mod known_cdf;
mod matched;
mod sensitivity;

pub use known_cdf::{simulate_cohort_known_cdf, simulate_individual_known_cdf};
pub use sensitivity::{agreement_pct, sensitivity_m_run, SensitivityReport, SensitivityRow};

use crate::record::IndividualRecord;
use crate::rng::Streams;
use crate::scenario::{CompiledScenario, EvalCtx, TreatmentKind, VarKind};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::Arc;

/// Caller-supplied risk-score function, used when a scenario names a score
/// extension: `(x, b, l_current, l_lagged, a_current, visit) -> score`.
pub type ScoreHook = dyn Fn(&[f64], &[f64], &[f64], &[f64], f64, usize) -> f64 + Send + Sync;

/// Engine knobs that do not belong to the scenario itself.
#[derive(Clone, Default)]
pub struct EngineOptions {
    /// Store the individual's rank-based CDF value for each decided visit in
    /// [`IndividualRecord::risk_quantiles`].
    pub record_risk_quantiles: bool,
    /// Score function backing a declared risk-score extension.
    pub score_hook: Option<Arc<ScoreHook>>,
    /// Salt for the match-pool noise stream; runs differing only in this
    /// value share every individual-level draw.
    pub pool_salt: u64,
    /// Force this treatment path (one value per visit) instead of sampling
    /// from the treatment model. The treatment stream is left untouched, so
    /// forced and sampled runs agree on all other draws.
    pub forced_regime: Option<Vec<f64>>,
}

impl EngineOptions {
    fn validate(&self, sc: &CompiledScenario) -> Result<()> {
        if let Some(r) = &self.forced_regime {
            if r.len() != sc.visits() {
                return Err(Error::Scenario(format!(
                    "forced regime must give one treatment per visit ({}), got {}",
                    sc.visits(),
                    r.len()
                )));
            }
        }
        Ok(())
    }
}

/// Generate `n` individuals with the matched-pool engine. Deterministic in
/// `(scenario, n, root_seed, options)` regardless of worker threads.
pub fn simulate_cohort(
    sc: &CompiledScenario,
    n: usize,
    root_seed: u64,
    opts: &EngineOptions,
) -> Result<Vec<IndividualRecord>> {
    opts.validate(sc)?;
    (0..n as u64)
        .into_par_iter()
        .map(|id| matched::simulate_individual(sc, Streams::new(root_seed, id), opts))
        .collect()
}

/// Generate `n` individuals under a fixed treatment regime (potential
/// outcomes). Shares every non-treatment draw with [`simulate_cohort`].
pub fn simulate_potential_arm(
    sc: &CompiledScenario,
    regime: &[f64],
    n: usize,
    root_seed: u64,
    opts: &EngineOptions,
) -> Result<Vec<IndividualRecord>> {
    let mut forced = opts.clone();
    forced.forced_regime = Some(regime.to_vec());
    simulate_cohort(sc, n, root_seed, &forced)
}

// --------------------------------------------------------------------------
// Sampling helpers shared by the engines and the grid estimator. Draw
// discipline: exactly one rng draw per generated variable, in declaration
// order, so stream positions depend only on the visit count.

pub(crate) fn sample_kind(
    kind: VarKind,
    lp_value: f64,
    sd: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    match kind {
        VarKind::Normal => {
            let z: f64 = rng.sample(StandardNormal);
            lp_value + sd * z
        }
        VarKind::Bernoulli => {
            let u: f64 = rng.random();
            f64::from(u < crate::scenario::expit(lp_value))
        }
    }
}

pub(crate) fn sample_x(sc: &CompiledScenario, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(sc.n_x());
    for spec in &sc.x {
        let ctx = EvalCtx {
            x: &x,
            b: &[],
            l_cur: &[],
            l_lag: &[],
            a_lag: 0.0,
            k: 0,
        };
        let lp = spec.lp.eval(&ctx);
        x.push(sample_kind(spec.kind, lp, spec.sd, rng));
    }
    x
}

pub(crate) fn sample_b(sc: &CompiledScenario, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = Vec::with_capacity(sc.n_b());
    sample_b_into(sc, x, rng, &mut b);
    b
}

/// Allocation-free variant for pool members; `out` is cleared first.
pub(crate) fn sample_b_into(
    sc: &CompiledScenario,
    x: &[f64],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) {
    out.clear();
    for spec in &sc.b {
        let ctx = EvalCtx {
            x,
            b: out,
            l_cur: &[],
            l_lag: &[],
            a_lag: 0.0,
            k: 0,
        };
        let lp = spec.lp.eval(&ctx);
        out.push(sample_kind(spec.kind, lp, spec.sd, rng));
    }
}

/// Sample the visit-`k` confounders into `out` (cleared first). `l_lag` must
/// hold the previous visit's values for `k >= 1`.
pub(crate) fn sample_l(
    sc: &CompiledScenario,
    x: &[f64],
    b: &[f64],
    l_lag: &[f64],
    a_lag: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) {
    out.clear();
    for spec in &sc.l {
        let ctx = EvalCtx {
            x,
            b,
            l_cur: out,
            l_lag,
            a_lag,
            k,
        };
        let lp = if k == 0 {
            spec.init.eval(&ctx)
        } else {
            spec.transition.eval(&ctx)
        };
        out.push(sample_kind(spec.kind, lp, spec.sd, rng));
    }
}

pub(crate) fn sample_treatment(
    sc: &CompiledScenario,
    ctx: &EvalCtx,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let lp = sc.treatment.lp.eval(ctx);
    match sc.treatment.kind {
        TreatmentKind::BinaryLogistic => {
            let u: f64 = rng.random();
            f64::from(u < crate::scenario::expit(lp))
        }
        TreatmentKind::Normal => {
            let z: f64 = rng.sample(StandardNormal);
            lp + sc.treatment.sd * z
        }
    }
}

/// Exponential censoring draw; consumed once per individual, after the
/// outcome trajectory.
pub(crate) fn sample_censoring(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    // Inverse CDF; u < 1, so ln(1 - u) is finite.
    -(-u).ln_1p() / rate
}

// --------------------------------------------------------------------------
// Pool of simulated peers, used both by the matched engine (one pool per
// sampled individual) and by the standalone CDF estimator (one pool per
// fixed treatment path). Flat column blocks, `n_b`/`n_l` values per member.

#[derive(Clone)]
pub(crate) struct MatchPool {
    pub n_b: usize,
    pub n_l: usize,
    /// Copy-tracking identities; a replacement inherits its donor's label.
    pub ident: Vec<usize>,
    pub b: Vec<f64>,
    pub l_cur: Vec<f64>,
    pub l_lag: Vec<f64>,
}

impl MatchPool {
    pub fn new(n_b: usize, n_l: usize) -> Self {
        MatchPool {
            n_b,
            n_l,
            ident: Vec::new(),
            b: Vec::new(),
            l_cur: Vec::new(),
            l_lag: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ident.len()
    }

    /// Discard all members and sample `n` fresh ones: identities reset to
    /// the index, `b` drawn from its baseline models.
    pub fn rebuild(
        &mut self,
        n: usize,
        sc: &CompiledScenario,
        x: &[f64],
        rng: &mut ChaCha8Rng,
        scratch: &mut Vec<f64>,
    ) {
        self.ident.clear();
        self.ident.extend(0..n);
        self.b.clear();
        self.b.reserve(n * self.n_b);
        for _ in 0..n {
            sample_b_into(sc, x, rng, scratch);
            self.b.extend_from_slice(scratch);
        }
        self.l_cur.clear();
        self.l_cur.resize(n * self.n_l, 0.0);
        self.l_lag.clear();
        self.l_lag.resize(n * self.n_l, 0.0);
    }

    pub fn b_of(&self, j: usize) -> &[f64] {
        &self.b[j * self.n_b..(j + 1) * self.n_b]
    }

    pub fn l_cur_of(&self, j: usize) -> &[f64] {
        &self.l_cur[j * self.n_l..(j + 1) * self.n_l]
    }

    pub fn l_lag_of(&self, j: usize) -> &[f64] {
        &self.l_lag[j * self.n_l..(j + 1) * self.n_l]
    }

    /// Advance every member's confounders to visit `k`; current values
    /// become the lag.
    pub fn advance_l(
        &mut self,
        sc: &CompiledScenario,
        x: &[f64],
        a_lag: f64,
        k: usize,
        rng: &mut ChaCha8Rng,
        scratch: &mut Vec<f64>,
    ) {
        std::mem::swap(&mut self.l_cur, &mut self.l_lag);
        for j in 0..self.len() {
            let (b, l_lag) = (
                &self.b[j * self.n_b..(j + 1) * self.n_b],
                &self.l_lag[j * self.n_l..(j + 1) * self.n_l],
            );
            sample_l(sc, x, b, l_lag, a_lag, k, rng, scratch);
            self.l_cur[j * self.n_l..(j + 1) * self.n_l].copy_from_slice(scratch);
        }
    }

    /// Append every member's visit-`k` risk score to `out`.
    pub fn extend_scores(
        &self,
        sc: &CompiledScenario,
        x: &[f64],
        a_lag: f64,
        a_cur: f64,
        k: usize,
        hook: Option<&ScoreHook>,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        out.reserve(self.len());
        for j in 0..self.len() {
            let ctx = EvalCtx {
                x,
                b: self.b_of(j),
                l_cur: self.l_cur_of(j),
                l_lag: self.l_lag_of(j),
                a_lag,
                k,
            };
            out.push(sc.eval_score(&ctx, a_cur, hook)?);
        }
        Ok(())
    }

    /// Replace member `j` with a copy of member `src` (identity included).
    pub fn copy_member(&mut self, j: usize, src: usize) {
        self.ident[j] = self.ident[src];
        for i in 0..self.n_b {
            self.b[j * self.n_b + i] = self.b[src * self.n_b + i];
        }
        for i in 0..self.n_l {
            self.l_cur[j * self.n_l + i] = self.l_cur[src * self.n_l + i];
            self.l_lag[j * self.n_l + i] = self.l_lag[src * self.n_l + i];
        }
    }

    /// Number of distinct member identities.
    pub fn unique_idents(&self, scratch: &mut Vec<usize>) -> usize {
        scratch.clear();
        scratch.extend_from_slice(&self.ident);
        scratch.sort_unstable();
        scratch.dedup();
        scratch.len()
    }
}

/// Rank-to-uniform and copula failure decisions for pool members.
///
/// `ranks[offset + j]` is member `j`'s rank among the `divisor` pool
/// participants; per member this draws one jitter uniform and one residual
/// normal from `rng`, then splits indices into `failed` / `survivors`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_failure_split(
    n_members: usize,
    ranks: &[u32],
    offset: usize,
    divisor: f64,
    g: f64,
    rho: f64,
    rng: &mut ChaCha8Rng,
    failed: &mut Vec<usize>,
    survivors: &mut Vec<usize>,
) -> Result<()> {
    let resid_sd = (1.0 - rho * rho).sqrt();
    failed.clear();
    survivors.clear();
    for j in 0..n_members {
        let w: f64 = rng.random();
        let u_h = crate::numeric::clamp_unit((ranks[offset + j] as f64 - w) / divisor);
        let eps: f64 = rng.sample(StandardNormal);
        let z_y = rho * crate::numeric::std_normal_quantile(u_h)? + resid_sd * eps;
        if crate::numeric::std_normal_cdf(z_y) < g {
            failed.push(j);
        } else {
            survivors.push(j);
        }
    }
    Ok(())
}

/// Replace each failed member with a copy of a uniformly chosen survivor.
/// Callers must ensure `survivors` is nonempty.
pub(crate) fn replace_failed_members(
    pool: &mut MatchPool,
    failed: &[usize],
    survivors: &[usize],
    rng: &mut ChaCha8Rng,
) {
    for &j in failed {
        let src = survivors[rng.random_range(0..survivors.len())];
        pool.copy_member(j, src);
    }
}
