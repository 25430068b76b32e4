//! Statistical validation suites.
//!
//! Every check runs a simulation (or quadrature) with pinned seeds and
//! compares against an independent oracle — a closed form, a law-of-total-
//! probability identity, or a distributional test at a fixed level. Checks
//! return structured [`CheckResult`]s so callers can render them as text or
//! JSON; nothing here panics on a statistical miss.
//!
//! [`quick_checks`] is the fast pre-flight suite (well under a minute);
//! [`full_checks`] runs the ten release criteria, several of which simulate
//! at six-figure cohort sizes and replicate entire studies, so expect
//! minutes to hours depending on the machine.

use std::time::Instant;

use serde::Serialize;

use crate::continuous_time::{
    builtin_ct_scenario, sample_event_paths, sample_marginal_failure, simulate_ct_cohort,
    LinearIntensity, StepPath,
};
use crate::engine::{simulate_cohort, simulate_potential_arm, EngineOptions};
use crate::estimate::{run_msm_validation, run_sim_study};
use crate::numeric::copula_conditional_failure_prob;
use crate::record::IndividualRecord;
use crate::risk_cdf::{estimate_grid_set, grid_lookup, GridKey};
use crate::scenario::{builtin_scenario, EvalCtx, ScenarioSpec};
use crate::stats::{
    adaptive_simpson, ks_crit_alpha01, ks_two_sample, ks_two_sample_crit_alpha01, ks_uniform,
    mean, quantile,
};
use crate::{csvio, Result};

/// Root seed for all validation runs. Fixed so reports are reproducible;
/// the statistical bounds hold at the ~3-sigma level, so a seed that trips
/// one under a true null is possible but was not observed for this one.
pub const VALIDATION_SEED: u64 = 0x6d73_6d2d_7661_6c31; // "msm-val1"

// ---------------------------------------------------------------------------
// Result plumbing

/// One statistic inside a check, with the bound it was held to.
#[derive(Clone, Debug, Serialize)]
pub struct CheckStat {
    pub label: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

/// Outcome of one validation check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub stats: Vec<CheckStat>,
    pub seconds: f64,
}

impl CheckResult {
    /// One-line rendering: name, verdict, and every statistic with its bound.
    pub fn summary_line(&self) -> String {
        let detail = self
            .stats
            .iter()
            .map(|s| {
                format!(
                    "{}={:.6} ({}{})",
                    s.label,
                    s.value,
                    s.bound,
                    if s.pass { "" } else { " VIOLATED" }
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        format!(
            "{}: {} [{:.1}s] {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.seconds,
            detail
        )
    }
}

struct Check {
    name: &'static str,
    stats: Vec<CheckStat>,
    start: Instant,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check {
            name,
            stats: Vec::new(),
            start: Instant::now(),
        }
    }

    fn le(&mut self, label: impl Into<String>, value: f64, bound: f64) {
        self.stats.push(CheckStat {
            label: label.into(),
            value,
            bound: format!("<= {bound}"),
            pass: value <= bound,
        });
    }

    fn within(&mut self, label: impl Into<String>, value: f64, target: f64, tol: f64) {
        self.stats.push(CheckStat {
            label: label.into(),
            value,
            bound: format!("within {tol} of {target}"),
            pass: (value - target).abs() <= tol,
        });
    }

    fn in_range(&mut self, label: impl Into<String>, value: f64, lo: f64, hi: f64) {
        self.stats.push(CheckStat {
            label: label.into(),
            value,
            bound: format!("in [{lo}, {hi}]"),
            pass: (lo..=hi).contains(&value),
        });
    }

    fn yes(&mut self, label: impl Into<String>, value: f64, bound: impl Into<String>, ok: bool) {
        self.stats.push(CheckStat {
            label: label.into(),
            value,
            bound: bound.into(),
            pass: ok,
        });
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            pass: self.stats.iter().all(|s| s.pass),
            seconds: self.start.elapsed().as_secs_f64(),
            stats: self.stats,
        }
    }
}

fn term_estimate(report: &crate::estimate::MsmFitReport, term: &str, weighted: bool) -> f64 {
    let i = report
        .term_names
        .iter()
        .position(|n| n == term)
        .unwrap_or_else(|| panic!("term {term} missing from the working model"));
    if weighted {
        report.iptw_term_estimates()[i]
    } else {
        report.naive_term_estimates()[i]
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: copula law of total probability (fast, pure quadrature)

/// Integrating the conditional failure probability over the risk quantile
/// must return the marginal `g` exactly — this identity is the reason the
/// generated data satisfy the target model.
pub fn check_copula_total_probability() -> Result<CheckResult> {
    let mut c = Check::new("copula-total-probability");
    for &g in &[0.036, 0.1, 0.25, 0.5, 0.9] {
        for &rho in &[0.0, -0.5, -0.9] {
            let f = move |u: f64| copula_conditional_failure_prob(g, rho, u).unwrap();
            // The integrand is bounded by 1, so insetting the endpoints (where
            // the normal quantile of u is infinite) perturbs the integral by
            // less than 2e-12 — far inside the 1e-6 acceptance bound.
            let integral = adaptive_simpson(&f, 1e-12, 1.0 - 1e-12, 1e-9);
            c.le(
                format!("|quadrature - g| at g={g}, rho={rho}"),
                (integral - g).abs(),
                1e-6,
            );
        }
    }
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criteria 1-2: IPTW recovery of the target coefficients

fn iptw_recovery(
    c: &mut Check,
    preset: &str,
    n: usize,
    seed: u64,
    tol_a: f64,
    check_all: bool,
) -> Result<()> {
    let sc = builtin_scenario(preset)?.compile()?;
    let report = run_msm_validation(&sc, n, seed, 0)?;
    if check_all {
        c.within(
            format!("{preset} iptw x1"),
            term_estimate(&report, "x1", true),
            0.5,
            0.05,
        );
        c.within(
            format!("{preset} iptw x2"),
            term_estimate(&report, "x2", true),
            0.5,
            0.05,
        );
        c.in_range(
            format!("{preset} naive a"),
            term_estimate(&report, "a", false),
            0.10,
            0.40,
        );
    }
    c.within(
        format!("{preset} iptw a"),
        term_estimate(&report, "a", true),
        -1.0,
        tol_a,
    );
    Ok(())
}

/// Headline replication: the medium-hazard pooled-logistic preset at
/// n = 100 000 with the preset's m = 1000 pool. Weighted estimates recover
/// (0.5, 0.5, -1); the unweighted treatment coefficient shows the expected
/// confounding bias; the whole run stays inside ten minutes.
pub fn check_headline_replication() -> Result<CheckResult> {
    let mut c = Check::new("headline-iptw-recovery");
    iptw_recovery(&mut c, "logistic-medium", 100_000, VALIDATION_SEED ^ 1, 0.05, true)?;
    let secs = c.start.elapsed().as_secs_f64();
    c.le("seconds", secs, 600.0);
    Ok(c.finish())
}

/// The low- and high-hazard pooled-logistic presets at n = 100 000: the
/// weighted treatment coefficient recovers -1 (wider tolerance for the
/// low-risk cell, whose effective event count is much smaller).
pub fn check_low_high_recovery() -> Result<CheckResult> {
    let mut c = Check::new("low-high-iptw-recovery");
    iptw_recovery(&mut c, "logistic-low", 100_000, VALIDATION_SEED ^ 2, 0.08, false)?;
    iptw_recovery(&mut c, "logistic-high", 100_000, VALIDATION_SEED ^ 3, 0.05, false)?;
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 3: potential-arm hazards match the model

/// Simulate both forced arms of the piecewise-hazard preset and compare the
/// empirical per-visit interventional hazard with the model value inside
/// every baseline-covariate quartile, every visit, both arms. Differences
/// are scored in Poisson-binomial standard errors; the largest |z| over all
/// strata must stay under 3.
pub fn check_potential_arm_hazards() -> Result<CheckResult> {
    let mut c = Check::new("potential-arm-hazards");
    let sc = builtin_scenario("cox-high-high")?.compile()?;
    let n = 50_000;
    let visits = sc.visits();
    let mut max_z: f64 = 0.0;
    let mut strata = 0usize;
    for (arm, treat) in [(0usize, 0.0f64), (1, 1.0)] {
        let regime = vec![treat; visits];
        let cohort = simulate_potential_arm(
            &sc,
            &regime,
            n,
            VALIDATION_SEED ^ (10 + arm as u64),
            &EngineOptions::default(),
        )?;
        let x1: Vec<f64> = cohort.iter().map(|r| r.x[0]).collect();
        let cuts = [
            quantile(&x1, 0.25),
            quantile(&x1, 0.5),
            quantile(&x1, 0.75),
        ];
        let stratum_of = |v: f64| cuts.iter().filter(|&&c| v > c).count();
        for k in 0..visits {
            let mut fails = [0usize; 4];
            let mut expected = [0f64; 4];
            let mut var = [0f64; 4];
            let mut at_risk = [0usize; 4];
            for rec in &cohort {
                if !rec.alive_at(k) {
                    continue;
                }
                let s = stratum_of(rec.x[0]);
                let g = sc.eval_g(k, &regime[..=k], &rec.x)?;
                at_risk[s] += 1;
                expected[s] += g;
                var[s] += g * (1.0 - g);
                fails[s] += usize::from(rec.failure_visit == Some(k as u32 + 1));
            }
            for s in 0..4 {
                if at_risk[s] == 0 {
                    continue;
                }
                strata += 1;
                let z = (fails[s] as f64 - expected[s]) / var[s].sqrt();
                if z.abs() > max_z {
                    max_z = z.abs();
                }
            }
        }
    }
    c.le(
        format!("max |z| over {strata} arm/visit/quartile strata"),
        max_z,
        3.0,
    );
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 5: recorded risk quantiles are uniform at every visit

/// At every visit of a matched run with a large pool, the engine's recorded
/// rank-based risk quantiles among survivors must be Uniform(0,1)
/// (Kolmogorov-Smirnov at the 1% level, per visit).
///
/// Uniformity is a property of the regime-following (interventional)
/// population: within a treatment arm, the quantile of a survivor's score
/// against the matched survivor distribution is uniform by construction, and
/// that is what the copula relies on. The check therefore runs both constant
/// regimes. (On an observed cohort the same pooled transform is uniform at
/// the first visit but drifts afterwards, because conditioning on a realized
/// confounded treatment path tilts the covariate law away from the matched
/// interventional population — that drift is the confounding itself, not an
/// engine defect, and a regression test pins it separately.)
pub fn check_risk_quantile_uniformity() -> Result<CheckResult> {
    let mut spec = builtin_scenario("logistic-medium")?;
    spec.pool.m = 5000;
    let sc = spec.compile()?;
    let mut c = Check::new("risk-quantile-uniformity");
    for (arm, a) in [("never-treat", 0.0), ("always-treat", 1.0)] {
        let opts = EngineOptions {
            record_risk_quantiles: true,
            forced_regime: Some(vec![a; sc.visits()]),
            ..EngineOptions::default()
        };
        let cohort = simulate_cohort(&sc, 2000, VALIDATION_SEED ^ 20, &opts)?;
        for k in 0..sc.visits() {
            let sample: Vec<f64> = cohort
                .iter()
                .filter_map(|r| r.risk_quantiles.get(k).copied())
                .collect();
            c.le(
                format!("{arm} KS at visit {k} (n={})", sample.len()),
                ks_uniform(&sample),
                ks_crit_alpha01(sample.len()),
            );
        }
    }
    Ok(c.finish())
}

/// Per-visit (or pooled) uniformity of the engine's recorded risk
/// quantiles for an arbitrary scenario; the release criterion and the quick
/// suite both delegate here.
pub fn risk_quantile_uniformity_for(
    name: &'static str,
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
    pooled: bool,
) -> Result<CheckResult> {
    let mut c = Check::new(name);
    let sc = spec.compile()?;
    let opts = EngineOptions {
        record_risk_quantiles: true,
        ..EngineOptions::default()
    };
    let cohort = simulate_cohort(&sc, n, seed, &opts)?;
    if pooled {
        let sample: Vec<f64> = cohort
            .iter()
            .flat_map(|r| r.risk_quantiles.iter().copied())
            .collect();
        c.le(
            format!("pooled KS over {} quantiles", sample.len()),
            ks_uniform(&sample),
            ks_crit_alpha01(sample.len()),
        );
    } else {
        for k in 0..sc.visits() {
            let sample: Vec<f64> = cohort
                .iter()
                .filter_map(|r| r.risk_quantiles.get(k).copied())
                .collect();
            c.le(
                format!("KS at visit {k} (n={})", sample.len()),
                ks_uniform(&sample),
                ks_crit_alpha01(sample.len()),
            );
        }
    }
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 6: within-interval failure times follow the piecewise law

/// Under a fixed regime of the continuous-time-readable preset, a failure
/// inside `(k, k+1]` must land according to the truncated exponential at
/// that individual's interval hazard. Each failure is transformed by its
/// own conditional CDF; the pooled transforms must be Uniform(0,1).
pub fn check_within_interval_law() -> Result<CheckResult> {
    let mut c = Check::new("within-interval-law");
    let sc = builtin_scenario("cox-high-high")?.compile()?;
    let visits = sc.visits();
    let regime = vec![0.0; visits];
    let cohort = simulate_potential_arm(
        &sc,
        &regime,
        10_000,
        VALIDATION_SEED ^ 30,
        &EngineOptions::default(),
    )?;
    let mut pit = Vec::new();
    for rec in &cohort {
        let (Some(fv), Some(t)) = (rec.failure_visit, rec.failure_time) else {
            continue;
        };
        let k = fv as usize - 1;
        let lambda = sc.interval_hazard(k, &regime[..=k], &rec.x)?;
        let s = t - k as f64;
        let u = (-(-lambda * s).exp_m1()) / (-(-lambda).exp_m1());
        pit.push(u);
    }
    c.yes(
        "pooled failures",
        pit.len() as f64,
        ">= 2000",
        pit.len() >= 2000,
    );
    c.le(
        format!("KS of conditional transforms (n={})", pit.len()),
        ks_uniform(&pit),
        ks_crit_alpha01(pit.len()),
    );
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 7: small-sample replicated study

/// Replicated small-sample study on the high-delta/high-correlation cell:
/// 200 replicates of n = 500 with a 500-draw bootstrap. The weighted
/// treatment coefficient must be nearly unbiased, both interval methods
/// must cover near the nominal level, and the bootstrap must not trail the
/// sandwich by more than 3 points.
pub fn check_small_sample_study() -> Result<CheckResult> {
    let mut c = Check::new("small-sample-study");
    let sc = builtin_scenario("cox-high-high")?.compile()?;
    let table = run_sim_study(&sc, 500, 200, 500, VALIDATION_SEED ^ 40)?;
    let row = table
        .rows
        .iter()
        .find(|r| r.name == "a")
        .expect("treatment row in study table");
    c.within("iptw bias of a", row.bias_iptw, 0.0, 0.15);
    c.in_range("sandwich coverage", row.coverage_sandwich, 0.87, 0.97);
    let boot = row.coverage_bootstrap.unwrap_or(f64::NAN);
    c.in_range("bootstrap coverage", boot, 0.87, 0.97);
    c.yes(
        "bootstrap vs sandwich coverage",
        boot - row.coverage_sandwich,
        ">= -0.03",
        boot - row.coverage_sandwich >= -0.03,
    );
    let secs = c.start.elapsed().as_secs_f64();
    c.le("seconds", secs, 7200.0);
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 8: sensitivity of outcomes to the pool size

fn outcome_identical(a: &IndividualRecord, b: &IndividualRecord) -> bool {
    a.failure_visit == b.failure_visit && a.failure_time == b.failure_time
}

/// Fraction of individuals whose outcome (failure visit and exact failure
/// time) is identical to a reference run with pool size `reference_m`, for
/// each pool size in `m_list`. All runs share the root seed, so per-
/// individual streams are pinned and differences isolate the pool's
/// influence on the rank-based quantiles.
pub fn pool_agreement(
    spec: &ScenarioSpec,
    m_list: &[usize],
    reference_m: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<csvio::AgreementRow>> {
    let opts = EngineOptions::default();
    let run = |m: usize| -> Result<Vec<IndividualRecord>> {
        let mut s = spec.clone();
        s.pool.m = m;
        simulate_cohort(&s.compile()?, n, seed, &opts)
    };
    let reference = run(reference_m)?;
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let cohort = run(m)?;
        let same = cohort
            .iter()
            .zip(&reference)
            .filter(|(a, b)| outcome_identical(a, b))
            .count();
        let p = same as f64 / n as f64;
        rows.push(csvio::AgreementRow {
            m,
            agreement: p,
            mc_se: (p * (1.0 - p) / n as f64).sqrt(),
        });
    }
    Ok(rows)
}

/// Outcome agreement with a large-pool reference run must improve strictly
/// with the pool size, and a weaker copula correlation must agree better at
/// the same pool size.
pub fn check_pool_size_agreement() -> Result<CheckResult> {
    let mut c = Check::new("pool-size-agreement");
    let n = 10_000;
    let seed = VALIDATION_SEED ^ 50;
    // The high-event-rate pooled-logistic preset: outcome flips under pool
    // noise are frequent enough there for the orderings to be sharp.
    let strong = builtin_scenario("logistic-high")?; // rho = -0.9
    let rows = pool_agreement(&strong, &[10, 500, 5000], 5000, n, seed)?;
    let (a10, a500, a5000) = (rows[0].agreement, rows[1].agreement, rows[2].agreement);
    c.yes(
        "agreement(m=10) < agreement(m=500)",
        a500 - a10,
        "> 0",
        a10 < a500,
    );
    c.yes(
        "agreement(m=500) < agreement(m=5000)",
        a5000 - a500,
        "> 0",
        a500 < a5000,
    );
    // Same scenario, weaker copula correlation: the failure indicator then
    // depends less on the rank-based quantile, so the same pool noise flips
    // fewer outcomes.
    let mut weak = builtin_scenario("logistic-high")?;
    weak.rho = crate::scenario::ScalarOrPerVisit::Scalar(-0.5);
    let weak_rows = pool_agreement(&weak, &[500], 5000, n, seed)?;
    c.yes(
        "agreement at rho=-0.5 vs rho=-0.9 (m=500)",
        weak_rows[0].agreement - a500,
        "> 0",
        weak_rows[0].agreement > a500,
    );
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 9: continuous-time engine property suite

/// Three properties of the continuous-time engine: with zero copula
/// correlation the matched construction reproduces direct inversion of the
/// marginal law (two-sample KS); a constant confounder intensity yields
/// Poisson change counts; and a forced-treatment cohort's survival curve
/// matches the closed form at three time points.
pub fn check_continuous_time_suite() -> Result<CheckResult> {
    let mut c = Check::new("continuous-time-suite");
    let base = builtin_ct_scenario("ct-example")?;

    // Part 1: rho = 0 reduction, 10^4 matched vs 10^4 direct draws.
    let mut indep = base.clone();
    indep.rho = 0.0;
    let sc = indep.compile()?;
    let n = 10_000;
    let sentinel = sc.tau() + 1.0;
    let matched: Vec<f64> = simulate_ct_cohort(&sc, n, VALIDATION_SEED ^ 60, None)?
        .iter()
        .map(|r| r.failure_time.unwrap_or(sentinel))
        .collect();
    let direct: Vec<f64> = (0..n as u64)
        .map(|id| {
            sample_marginal_failure(&sc, VALIDATION_SEED ^ 61, id)
                .map(|(_, t)| t.unwrap_or(sentinel))
        })
        .collect::<Result<_>>()?;
    c.le(
        "two-sample KS (matched vs direct, rho=0)",
        ks_two_sample(&matched, &direct),
        ks_two_sample_crit_alpha01(n, n),
    );

    // Part 2: constant confounder intensity 0.2 over tau = 10 gives
    // Poisson(2) change counts.
    let mut poisson = base.clone();
    poisson.alpha_a = LinearIntensity {
        intercept: 0.0,
        coef_l: 0.0,
        coef_a: 0.0,
    };
    poisson.alpha_l = LinearIntensity {
        intercept: 0.2,
        coef_l: 0.0,
        coef_a: 0.0,
    };
    let sc = poisson.compile()?;
    let mut rng = crate::rng::derive_rng(VALIDATION_SEED ^ 62, 0, crate::rng::StreamRole::Grid, 0);
    let reps = 10_000;
    let counts: Vec<f64> = (0..reps)
        .map(|_| Ok(sample_event_paths(&sc, None, &mut rng)?.1.change_count() as f64))
        .collect::<Result<_>>()?;
    c.within(
        "mean confounder change count",
        mean(&counts),
        2.0,
        3.0 * (2.0 / reps as f64).sqrt(),
    );

    // Part 3: always-treated cohort survival vs the closed form
    // exp(-hazard * t) at tau/4, tau/2, tau.
    let sc = base.compile()?;
    let hazard = base.msm.hazard(1.0);
    let always = StepPath::constant(1.0);
    let n = 4000;
    let cohort = simulate_ct_cohort(&sc, n, VALIDATION_SEED ^ 63, Some(&always))?;
    for frac in [0.25, 0.5, 1.0] {
        let t = base.tau * frac;
        let surv = cohort
            .iter()
            .filter(|r| r.failure_time.map_or(true, |ft| ft > t))
            .count() as f64
            / n as f64;
        let p = (-hazard * t).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        c.within(format!("forced-arm survival at t={t}"), surv, p, 3.0 * se);
    }
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Criterion 10: worker-count determinism

/// The same seed must yield byte-identical outputs whether the work runs on
/// one thread or eight: simulated records, person-period exports, and
/// continuous-time event exports are all compared after runs in explicit
/// thread pools of both sizes.
pub fn check_worker_determinism() -> Result<CheckResult> {
    worker_determinism_sized("worker-determinism", 400, 100)
}

pub fn worker_determinism_sized(
    name: &'static str,
    n_discrete: usize,
    n_ct: usize,
) -> Result<CheckResult> {
    let mut c = Check::new(name);
    let sc = builtin_scenario("logistic-medium")?.compile()?;
    let ct = builtin_ct_scenario("ct-example")?.compile()?;
    let seed = VALIDATION_SEED ^ 70;
    let opts = EngineOptions::default();

    let run_all = |threads: usize| -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| {
            let cohort = simulate_cohort(&sc, n_discrete, seed, &opts)?;
            let mut pp = Vec::new();
            csvio::write_person_period_csv(&mut pp, &sc, &cohort, false)?;
            let mut summary = Vec::new();
            csvio::write_summary_csv(&mut summary, &sc, &cohort)?;
            let ct_cohort = simulate_ct_cohort(&ct, n_ct, seed, None)?;
            let mut events = Vec::new();
            csvio::write_ct_events_csv(&mut events, &ct_cohort)?;
            Ok((pp, summary, events))
        })
    };
    let (pp1, sum1, ev1) = run_all(1)?;
    let (pp8, sum8, ev8) = run_all(8)?;
    c.yes(
        "person-period bytes 1 vs 8 workers",
        pp1.len() as f64,
        "identical",
        pp1 == pp8,
    );
    c.yes(
        "summary bytes 1 vs 8 workers",
        sum1.len() as f64,
        "identical",
        sum1 == sum8,
    );
    c.yes(
        "event-history bytes 1 vs 8 workers",
        ev1.len() as f64,
        "identical",
        ev1 == ev8,
    );
    Ok(c.finish())
}

// ---------------------------------------------------------------------------
// Plug-back uniformity (quick suite; sensitive to any mismatch between the
// generating law and the conditional score distributions)

/// Estimate conditional score CDF grids under `grid_spec`, simulate a
/// cohort under `data_spec`, then push every survivor's realised score at
/// every visit through the matching grid. When the two specs agree the
/// transforms are Uniform(0,1); any distortion of the survivor score law —
/// e.g. a corrupted copula correlation — shifts them detectably.
pub fn plugback_uniformity(
    name: &'static str,
    data_spec: &ScenarioSpec,
    grid_spec: &ScenarioSpec,
    n: usize,
    grid_m: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut c = Check::new(name);
    let data_sc = data_spec.compile()?;
    let grid_sc = grid_spec.compile()?;
    let grids = estimate_grid_set(&grid_sc, grid_m, seed ^ 0xA5A5, None)?;
    let cohort = simulate_cohort(&data_sc, n, seed, &EngineOptions::default())?;
    let n_l = data_sc.n_l();
    let zeros = vec![0.0; n_l];
    let mut sample = Vec::new();
    for rec in &cohort {
        for k in 0..rec.visits_attended() {
            let ctx = EvalCtx {
                x: &rec.x,
                b: &rec.b,
                l_cur: rec.l_at(k, n_l),
                l_lag: if k == 0 { &zeros } else { rec.l_at(k - 1, n_l) },
                a_lag: if k == 0 { 0.0 } else { rec.a[k - 1] },
                k,
            };
            let h = data_sc.eval_score(&ctx, rec.a[k], None)?;
            let key = GridKey::from_values(&rec.x, &rec.a[..=k]);
            let grid = grids.get(&key).ok_or_else(|| {
                crate::Error::MissingGrid(format!("no grid for {key:?} during plug-back"))
            })?;
            sample.push(grid_lookup(grid, h));
        }
    }
    c.le(
        format!("pooled plug-back KS over {} values", sample.len()),
        ks_uniform(&sample),
        ks_crit_alpha01(sample.len()),
    );
    Ok(c.finish())
}

/// Small binary-covariate scenario for grid-based checks (the planner
/// requires binary baseline covariates).
pub(crate) fn grid_fixture(rho: f64) -> ScenarioSpec {
    crate::parse_scenario(&format!(
        r#"{{
            "visits": 4,
            "baseline_x": [{{"name":"x1","kind":"bernoulli","model":{{}}}}],
            "baseline_b": [{{"name":"b1","kind":"normal","model":{{}}}}],
            "confounders": [{{
                "name":"l1","kind":"normal",
                "init":{{"terms":[{{"coef":0.4,"var":"b1"}}]}},
                "transition":{{"terms":[
                    {{"coef":0.4,"var":"b1"}},
                    {{"coef":0.5,"var":"l1.lag1"}},
                    {{"coef":-0.3,"var":"a.lag1"}}]}}
            }}],
            "treatment": {{"kind":"binary-logistic",
                "model":{{"intercept":-0.6,"terms":[{{"coef":0.7,"var":"l1"}}]}}}},
            "msm": {{"link":"logit","baseline":-0.8,
                "terms":[{{"coef":0.3,"product":["x1"]}},{{"coef":-0.6,"product":["a"]}}]}},
            "risk_score": {{"terms":[{{"coef":1.0,"var":"l1"}},{{"coef":0.5,"var":"b1"}}]}},
            "rho": {rho},
            "pool": {{"m": 300}}
        }}"#
    ))
    .expect("fixture parses")
}

// ---------------------------------------------------------------------------
// Suites

fn run(check: impl FnOnce() -> Result<CheckResult>, name: &str) -> CheckResult {
    check().unwrap_or_else(|e| CheckResult {
        name: name.to_string(),
        pass: false,
        stats: vec![CheckStat {
            label: format!("error: {e}"),
            value: f64::NAN,
            bound: "check must run to completion".into(),
            pass: false,
        }],
        seconds: 0.0,
    })
}

/// Fast pre-flight suite (seconds, not minutes): quadrature identity,
/// pooled risk-quantile uniformity, grid plug-back uniformity, a small
/// continuous-time reduction, and worker determinism.
pub fn quick_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(run(check_copula_total_probability, "copula-total-probability"));
    out.push(run(
        || {
            risk_quantile_uniformity_for(
                "risk-quantile-uniformity-quick",
                &builtin_scenario("logistic-medium")?,
                400,
                VALIDATION_SEED ^ 80,
                true,
            )
        },
        "risk-quantile-uniformity-quick",
    ));
    out.push(run(
        || {
            let spec = grid_fixture(-0.6);
            plugback_uniformity(
                "grid-plugback-uniformity",
                &spec,
                &spec,
                500,
                20_000,
                VALIDATION_SEED ^ 81,
            )
        },
        "grid-plugback-uniformity",
    ));
    out.push(run(
        || {
            let mut ct = builtin_ct_scenario("ct-example")?;
            ct.rho = 0.0;
            ct.pool.m = 16;
            let sc = ct.compile()?;
            let n = 1500;
            let sentinel = sc.tau() + 1.0;
            let matched: Vec<f64> = simulate_ct_cohort(&sc, n, VALIDATION_SEED ^ 82, None)?
                .iter()
                .map(|r| r.failure_time.unwrap_or(sentinel))
                .collect();
            let direct: Vec<f64> = (0..n as u64)
                .map(|id| {
                    sample_marginal_failure(&sc, VALIDATION_SEED ^ 83, id)
                        .map(|(_, t)| t.unwrap_or(sentinel))
                })
                .collect::<Result<_>>()?;
            let mut c = Check::new("continuous-time-quick");
            c.le(
                "two-sample KS (matched vs direct, rho=0)",
                ks_two_sample(&matched, &direct),
                ks_two_sample_crit_alpha01(n, n),
            );
            Ok(c.finish())
        },
        "continuous-time-quick",
    ));
    out.push(run(
        || worker_determinism_sized("worker-determinism-quick", 150, 40),
        "worker-determinism-quick",
    ));
    out
}

/// The ten release criteria, in order. Heavy: six-figure cohorts and a
/// replicated study with bootstrap; budget minutes to a couple of hours.
pub fn full_checks() -> Vec<CheckResult> {
    vec![
        run(check_headline_replication, "headline-iptw-recovery"),
        run(check_low_high_recovery, "low-high-iptw-recovery"),
        run(check_potential_arm_hazards, "potential-arm-hazards"),
        run(check_copula_total_probability, "copula-total-probability"),
        run(check_risk_quantile_uniformity, "risk-quantile-uniformity"),
        run(check_within_interval_law, "within-interval-law"),
        run(check_small_sample_study, "small-sample-study"),
        run(check_pool_size_agreement, "pool-size-agreement"),
        run(check_continuous_time_suite, "continuous-time-suite"),
        run(check_worker_determinism, "worker-determinism"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copula_identity_check_passes() {
        let r = check_copula_total_probability().unwrap();
        assert!(r.pass, "{}", r.summary_line());
        assert_eq!(r.stats.len(), 15);
    }

    #[test]
    fn plugback_uniformity_passes_on_a_consistent_spec() {
        let spec = grid_fixture(-0.6);
        let r = plugback_uniformity("plugback-self", &spec, &spec, 400, 20_000, 11).unwrap();
        assert!(r.pass, "{}", r.summary_line());
    }

    #[test]
    fn plugback_uniformity_detects_a_corrupted_correlation() {
        // Data generated under a strong negative correlation, but grids
        // estimated under a weak one: survivor selection differs, so the
        // plug-back transforms are visibly non-uniform.
        let data = grid_fixture(-0.9);
        let grids = grid_fixture(-0.1);
        let r = plugback_uniformity("plugback-corrupt", &data, &grids, 400, 20_000, 11).unwrap();
        assert!(!r.pass, "corrupted rho must fail: {}", r.summary_line());
    }

    #[test]
    fn check_results_render_and_serialise() {
        let mut c = Check::new("demo");
        c.within("x", 0.5, 0.4, 0.2);
        c.le("y", 2.0, 1.0);
        let r = c.finish();
        assert!(!r.pass);
        let line = r.summary_line();
        assert!(line.contains("demo: FAIL"), "{line}");
        assert!(line.contains("VIOLATED"), "{line}");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"bound\""));
    }

    #[test]
    fn quick_suite_is_green() {
        for r in quick_checks() {
            assert!(r.pass, "{}", r.summary_line());
        }
    }
}
