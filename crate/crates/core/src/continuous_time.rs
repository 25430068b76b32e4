//! Event-driven simulation for marginal structural models in continuous
//! time.
//!
//! Treatment and confounder are piecewise-constant jump processes whose
//! change times arrive through competing exponentials; the failure time is
//! tied to a time-varying risk score through the same rank-based Gaussian
//! copula as the discrete-time engine. Each simulated individual carries a
//! pool of matches that share its treatment path; the matches' risk scores
//! estimate the conditional score distribution segment by segment, and the
//! individual's failure time is repeatedly re-drawn by inverting the
//! marginal hazard, conditioned on survival so far, at every pooled event
//! boundary. Matches that fail drop out and are not replaced, so the pool
//! should be sized generously when failure before the horizon is likely.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numeric::{clamp_unit, std_normal_cdf, std_normal_quantile, tie_broken_ranks};
use crate::rng::{derive_rng, StreamRole, Streams};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Piecewise-constant paths

/// A right-continuous step function on `[0, ∞)`: `values[i]` holds on
/// `[times[i], times[i+1])` and the last value holds forever.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepPath {
    pub fn constant(value: f64) -> StepPath {
        StepPath {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times[0] != 0.0 {
            return Err(Error::Domain("a step path must start at time 0".into()));
        }
        if self.times.len() != self.values.len() {
            return Err(Error::Domain(
                "a step path needs one value per change time".into(),
            ));
        }
        if !self.times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Domain(
                "step path change times must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Value at time `t` (right-continuous; the new value applies at the
    /// change time itself).
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        self.values[idx.saturating_sub(1)]
    }

    /// First change time strictly after `t`, if any.
    pub fn next_change_after(&self, t: f64) -> Option<f64> {
        let idx = self.times.partition_point(|&s| s <= t);
        self.times.get(idx).copied()
    }

    fn push(&mut self, t: f64, value: f64) {
        self.times.push(t);
        self.values.push(value);
    }

    /// Number of changes after time zero.
    pub fn change_count(&self) -> usize {
        self.times.len() - 1
    }
}

// ---------------------------------------------------------------------------
// Scenario schema

fn default_ct_pool() -> CtPoolSpec {
    CtPoolSpec { m: 5000 }
}

fn default_seed() -> u64 {
    crate::rng::DEFAULT_ROOT_SEED
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CtKind {
    #[serde(rename = "continuous-time")]
    ContinuousTime,
}

/// Jump intensity that is linear in the current confounder level and
/// treatment value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearIntensity {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coef_l: f64,
    #[serde(default)]
    pub coef_a: f64,
}

impl LinearIntensity {
    pub fn rate(&self, l: f64, a: f64) -> f64 {
        self.intercept + self.coef_l * l + self.coef_a * a
    }
}

/// Marginal hazard of failure as a function of the current treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtMsmLink {
    /// `exp(baseline + treat_coef * a)`.
    Cox,
    /// `baseline + treat_coef * a` (must stay nonnegative).
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtMsmSpec {
    pub link: CtMsmLink,
    pub baseline: f64,
    pub treat_coef: f64,
}

impl CtMsmSpec {
    pub fn hazard(&self, a: f64) -> f64 {
        match self.link {
            CtMsmLink::Cox => (self.baseline + self.treat_coef * a).exp(),
            CtMsmLink::Additive => self.baseline + self.treat_coef * a,
        }
    }
}

/// Risk score `b_coef * L(0) + l_coef * L(t)`: it changes only when the
/// confounder jumps, which keeps the between-event ordering of pool members
/// stable, as the copula construction requires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtRiskScoreSpec {
    #[serde(default)]
    pub b_coef: f64,
    #[serde(default)]
    pub l_coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtPoolSpec {
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrLevels {
    Scalar(f64),
    PerLevel(Vec<f64>),
}

/// Scenario for the continuous-time engine: a binary treatment and one
/// categorical confounder jump at state-dependent exponential rates up to
/// the horizon `tau`; treatment jumps flip the value, confounder jumps move
/// uniformly to one of the other levels. The initial confounder level acts
/// as the unmodelled baseline variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtScenarioSpec {
    pub kind: CtKind,
    pub tau: f64,
    /// Number of confounder levels `0..l_levels`.
    pub l_levels: usize,
    /// Initial distribution of the confounder level.
    pub p_l0: Vec<f64>,
    /// Probability of initial treatment 1, optionally per confounder level.
    pub p_a0: ScalarOrLevels,
    pub alpha_a: LinearIntensity,
    pub alpha_l: LinearIntensity,
    pub msm: CtMsmSpec,
    pub risk_score: CtRiskScoreSpec,
    /// Copula correlation in `[-1, 0]`.
    pub rho: f64,
    #[serde(default = "default_ct_pool")]
    pub pool: CtPoolSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub label: Option<String>,
}

pub fn parse_ct_scenario(json: &str) -> Result<CtScenarioSpec> {
    Ok(serde_json::from_str(json)?)
}

/// Built-in continuous-time scenario: binary treatment and a three-level
/// confounder feeding back on each other (treatment uptake rises with the
/// confounder, confounder changes slow under treatment), a mild additive
/// marginal hazard, and a confounder-driven risk score.
pub fn builtin_ct_scenario(name: &str) -> Result<CtScenarioSpec> {
    match name {
        "ct-example" => Ok(CtScenarioSpec {
            kind: CtKind::ContinuousTime,
            tau: 10.0,
            l_levels: 3,
            p_l0: vec![0.4, 0.35, 0.25],
            p_a0: ScalarOrLevels::Scalar(0.3),
            alpha_a: LinearIntensity {
                intercept: 0.1,
                coef_l: 0.05,
                coef_a: 0.0,
            },
            alpha_l: LinearIntensity {
                intercept: 0.2,
                coef_l: 0.0,
                coef_a: -0.1,
            },
            msm: CtMsmSpec {
                link: CtMsmLink::Additive,
                baseline: 0.05,
                treat_coef: -0.02,
            },
            risk_score: CtRiskScoreSpec {
                b_coef: 0.3,
                l_coef: 1.0,
            },
            rho: -0.5,
            pool: CtPoolSpec { m: 60 },
            seed: crate::rng::DEFAULT_ROOT_SEED,
            label: Some(name.to_string()),
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Validated continuous-time scenario.
#[derive(Clone, Debug)]
pub struct CompiledCtScenario {
    pub spec: CtScenarioSpec,
    p_a0: Vec<f64>,
}

impl CtScenarioSpec {
    pub fn compile(&self) -> Result<CompiledCtScenario> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Scenario("tau must be positive and finite".into()));
        }
        if self.l_levels < 2 {
            return Err(Error::Scenario(
                "the confounder needs at least 2 levels".into(),
            ));
        }
        if self.p_l0.len() != self.l_levels {
            return Err(Error::Scenario(format!(
                "p_l0 has {} entries for {} levels",
                self.p_l0.len(),
                self.l_levels
            )));
        }
        if self.p_l0.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (self.p_l0.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Scenario("p_l0 must be a probability vector".into()));
        }
        let p_a0 = match &self.p_a0 {
            ScalarOrLevels::Scalar(p) => vec![*p; self.l_levels],
            ScalarOrLevels::PerLevel(v) => v.clone(),
        };
        if p_a0.len() != self.l_levels || p_a0.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Scenario(
                "p_a0 must be a probability, or one probability per confounder level".into(),
            ));
        }
        for l in 0..self.l_levels {
            for a in [0.0, 1.0] {
                let lf = l as f64;
                if self.alpha_a.rate(lf, a) < 0.0 || self.alpha_l.rate(lf, a) < 0.0 {
                    return Err(Error::InvalidHazard(format!(
                        "change intensity is negative at confounder level {l}, treatment {a}"
                    )));
                }
            }
            if self.msm.hazard(0.0) < 0.0 || self.msm.hazard(1.0) < 0.0 {
                return Err(Error::InvalidHazard(
                    "the marginal failure hazard is negative for some treatment value".into(),
                ));
            }
        }
        if !(-1.0..=0.0).contains(&self.rho) {
            return Err(Error::Scenario(format!(
                "rho must lie in [-1, 0], got {}",
                self.rho
            )));
        }
        if self.pool.m < 2 {
            return Err(Error::Scenario("the pool needs at least 2 members".into()));
        }
        Ok(CompiledCtScenario {
            spec: self.clone(),
            p_a0,
        })
    }
}

impl CompiledCtScenario {
    pub fn tau(&self) -> f64 {
        self.spec.tau
    }

    fn score(&self, b: f64, l_now: f64) -> f64 {
        self.spec.risk_score.b_coef * b + self.spec.risk_score.l_coef * l_now
    }
}

// ---------------------------------------------------------------------------
// Event-path sampling

fn sample_exp(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    if rate > 0.0 {
        -(-u).ln_1p() / rate
    } else {
        f64::INFINITY
    }
}

fn sample_level(p: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as f64;
        }
    }
    (p.len() - 1) as f64
}

/// Uniform draw over the confounder levels other than `current`.
fn jump_level(current: f64, levels: usize, rng: &mut ChaCha8Rng) -> f64 {
    let cur = current as usize;
    let pick = rng.random_range(0..levels - 1);
    if pick >= cur {
        (pick + 1) as f64
    } else {
        pick as f64
    }
}

/// Simulate the treatment and confounder processes up to the horizon by
/// competing exponentials, re-drawn from the current state after every
/// change. With a `fixed_treatment` path, only the confounder process is
/// sampled (one exponential per segment); otherwise each segment draws a
/// treatment candidate then a confounder candidate and the earlier one
/// wins. Returns the treatment and confounder paths.
pub fn sample_event_paths(
    sc: &CompiledCtScenario,
    fixed_treatment: Option<&StepPath>,
    rng: &mut ChaCha8Rng,
) -> Result<(StepPath, StepPath)> {
    let spec = &sc.spec;
    let tau = spec.tau;
    let l0 = sample_level(&spec.p_l0, rng);
    let mut l_path = StepPath::constant(l0);
    let mut l = l0;

    if let Some(a_path) = fixed_treatment {
        a_path.validate()?;
        let mut t = 0.0;
        loop {
            let a = a_path.value_at(t);
            let boundary = a_path.next_change_after(t).unwrap_or(tau).min(tau);
            let dt = sample_exp(spec.alpha_l.rate(l, a), rng);
            if t + dt < boundary {
                t += dt;
                l = jump_level(l, spec.l_levels, rng);
                l_path.push(t, l);
            } else if boundary >= tau {
                break;
            } else {
                // Advance to the treatment change and re-draw; the
                // exponential's lack of memory makes this exact.
                t = boundary;
            }
        }
        return Ok((a_path.clone(), l_path));
    }

    let pa = sc.p_a0[l0 as usize];
    let u: f64 = rng.random();
    let mut a = f64::from(u < pa);
    let mut a_path = StepPath::constant(a);
    let mut t = 0.0;
    loop {
        let ea = sample_exp(spec.alpha_a.rate(l, a), rng);
        let el = sample_exp(spec.alpha_l.rate(l, a), rng);
        let dt = ea.min(el);
        if t + dt >= tau {
            break;
        }
        t += dt;
        if ea <= el {
            a = 1.0 - a;
            a_path.push(t, a);
        } else {
            l = jump_level(l, spec.l_levels, rng);
            l_path.push(t, l);
        }
    }
    Ok((a_path, l_path))
}

// ---------------------------------------------------------------------------
// Marginal failure-time inversion

/// Integral of the marginal hazard over `[lo, hi)` under a treatment path.
pub fn cumulative_interventional_hazard(
    sc: &CompiledCtScenario,
    a_path: &StepPath,
    lo: f64,
    hi: f64,
) -> f64 {
    let mut cum = 0.0;
    let mut start = lo;
    while start < hi {
        let end = a_path.next_change_after(start).unwrap_or(hi).min(hi);
        cum += sc.spec.msm.hazard(a_path.value_at(start)) * (end - start);
        start = end;
    }
    cum
}

/// Invert the conditional failure-time distribution given survival to `s`:
/// returns the absolute time `t > s` at which the cumulative marginal
/// hazard since `s` reaches `-ln(1-u)`. Beyond the horizon the distribution
/// is extended linearly, so a returned time greater than `tau` means the
/// failure is administratively censored.
pub fn interventional_time_inverse(
    sc: &CompiledCtScenario,
    a_path: &StepPath,
    s: f64,
    u: f64,
) -> Result<f64> {
    let tau = sc.spec.tau;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "quantile probability must lie in (0,1), got {u}"
        )));
    }
    if !(s.is_finite() && s < tau) {
        return Err(Error::Domain(format!(
            "conditioning time {s} must precede the horizon {tau}"
        )));
    }
    let target = -(-u).ln_1p();
    let mut cum = 0.0;
    let mut start = s;
    while start < tau {
        let end = a_path.next_change_after(start).unwrap_or(tau).min(tau);
        let rate = sc.spec.msm.hazard(a_path.value_at(start));
        let capacity = rate * (end - start);
        if rate > 0.0 && cum + capacity >= target {
            return Ok(start + (target - cum) / rate);
        }
        cum += capacity;
        start = end;
    }
    // Linear extension past the horizon keeps the CDF continuous and
    // increasing; anything out here is administrative censoring.
    let f_tau = -(-cum).exp_m1();
    Ok(tau + (u - f_tau))
}

// ---------------------------------------------------------------------------
// Matched simulation

/// One simulated individual: full treatment and confounder paths on
/// `[0, tau]` and either a failure time or censoring at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct CtIndividualRecord {
    pub id: u64,
    pub a_path: StepPath,
    pub l_path: StepPath,
    /// Failure time in `(0, tau]`; `None` means censored at the horizon.
    pub failure_time: Option<f64>,
    /// Matches still alive when the individual's outcome resolved.
    pub surviving_matches: usize,
    /// Event-boundary iterations taken.
    pub rounds: u32,
}

struct CtMember {
    b: f64,
    l_path: StepPath,
    /// Current provisional failure time (re-drawn each segment).
    t_fail: f64,
}

/// Simulate one individual with its match pool. Matches copy the
/// individual's whole treatment path; between pooled event boundaries every
/// surviving member's provisional failure time is re-drawn from the
/// rank-based copula, and the boundary clock advances past change points
/// and match failures until the individual's own time lands inside the
/// current segment or the horizon is reached.
pub fn simulate_individual_ct(
    sc: &CompiledCtScenario,
    streams: &Streams,
    forced_treatment: Option<&StepPath>,
) -> Result<CtIndividualRecord> {
    let spec = &sc.spec;
    let m = spec.pool.m;
    let tau = spec.tau;
    let rho = spec.rho;
    let noise_sd = (1.0 - rho * rho).sqrt();

    let mut traj_rng = streams.covariates();
    let mut jitter_rng = streams.jitter();
    let mut copula_rng = streams.copula();
    let mut pool_rng = streams.pool(0);

    // The individual's own paths; matches share the treatment path.
    let (a_path, l_path) = sample_event_paths(sc, forced_treatment, &mut traj_rng)?;
    let slot = CtMember {
        b: l_path.values[0],
        l_path: l_path.clone(),
        t_fail: f64::INFINITY,
    };
    let mut members = Vec::with_capacity(m);
    members.push(slot);
    for _ in 1..m {
        let (_, lp) = sample_event_paths(sc, Some(&a_path), &mut pool_rng)?;
        members.push(CtMember {
            b: lp.values[0],
            l_path: lp,
            t_fail: f64::INFINITY,
        });
    }

    let mut t = 0.0;
    let mut rounds = 0u32;
    let mut scores = Vec::with_capacity(m);
    let mut warned = false;
    let failure_time = loop {
        rounds += 1;
        let alive: Vec<usize> = (0..m).filter(|&j| members[j].t_fail > t).collect();
        debug_assert_eq!(alive[0], 0, "the individual must be alive while iterating");
        if alive.len() == 1 {
            return Err(Error::PoolExhausted(format!(
                "all {} matches failed at time {t:.4} before individual {}'s outcome \
                 resolved; increase the pool size m",
                m - 1,
                streams.id
            )));
        }
        if !warned && (alive.len() - 1) * 10 < m - 1 {
            log::warn!(
                "individual {}: only {} of {} matches alive at time {t:.4}; \
                 conditional score quantiles are getting coarse",
                streams.id,
                alive.len() - 1,
                m - 1
            );
            warned = true;
        }

        // Next pooled boundary: any surviving member's confounder change,
        // any treatment change, or the horizon.
        let mut b = a_path.next_change_after(t).unwrap_or(tau).min(tau);
        for &j in &alive {
            if let Some(c) = members[j].l_path.next_change_after(t) {
                b = b.min(c);
            }
        }

        // Rank the surviving members' current risk scores (random
        // tie-breaks consume one pool draw per member), then jitter each
        // rank into a quantile and push it through the copula.
        scores.clear();
        scores.extend(
            alive
                .iter()
                .map(|&j| sc.score(members[j].b, members[j].l_path.value_at(t))),
        );
        let ranks = tie_broken_ranks(&scores, &mut pool_rng);
        let n_alive = alive.len() as f64;
        for (pos, &j) in alive.iter().enumerate() {
            let (w, eps): (f64, f64) = if j == 0 {
                (jitter_rng.random(), {
                    use rand::prelude::Distribution;
                    rand_distr::StandardNormal.sample(&mut copula_rng)
                })
            } else {
                (pool_rng.random(), {
                    use rand::prelude::Distribution;
                    rand_distr::StandardNormal.sample(&mut pool_rng)
                })
            };
            let u_h = clamp_unit((f64::from(ranks[pos]) - w) / n_alive);
            let z_h = std_normal_quantile(u_h)?;
            let u_t = clamp_unit(std_normal_cdf(rho * z_h + noise_sd * eps));
            members[j].t_fail = interventional_time_inverse(sc, &a_path, t, u_t)?;
        }

        // The boundary never skips a member failure.
        let min_fail = alive
            .iter()
            .map(|&j| members[j].t_fail)
            .fold(f64::INFINITY, f64::min);
        if b > min_fail {
            b = min_fail;
        }

        if members[0].t_fail > b && b < tau {
            t = b;
            continue;
        }
        break if members[0].t_fail > tau {
            None
        } else {
            Some(members[0].t_fail)
        };
    };

    let surviving_matches = (1..m).filter(|&j| members[j].t_fail > t).count();
    Ok(CtIndividualRecord {
        id: streams.id,
        a_path,
        l_path,
        failure_time,
        surviving_matches,
        rounds,
    })
}

/// Simulate `n` independent individuals (ids `0..n`).
pub fn simulate_ct_cohort(
    sc: &CompiledCtScenario,
    n: usize,
    root_seed: u64,
    forced_treatment: Option<&StepPath>,
) -> Result<Vec<CtIndividualRecord>> {
    (0..n as u64)
        .into_par_iter()
        .map(|id| simulate_individual_ct(sc, &Streams::new(root_seed, id), forced_treatment))
        .collect()
}

/// Directly invert the marginal law for one fresh individual, bypassing the
/// match machinery: sample the event paths, then one uniform. Used to
/// cross-check the matched engine when the copula correlation is zero.
pub fn sample_marginal_failure(
    sc: &CompiledCtScenario,
    root_seed: u64,
    id: u64,
) -> Result<(StepPath, Option<f64>)> {
    let streams = Streams::new(root_seed, id);
    let mut traj_rng = streams.covariates();
    let (a_path, _) = sample_event_paths(sc, None, &mut traj_rng)?;
    let mut u_rng = derive_rng(root_seed, id, StreamRole::Copula, 1);
    let u: f64 = u_rng.random();
    let t = interventional_time_inverse(sc, &a_path, 0.0, clamp_unit(u))?;
    let failure = if t > sc.spec.tau { None } else { Some(t) };
    Ok((a_path, failure))
}
