//! Numeric kernels shared by every engine: the standard-normal CDF/quantile
//! pair, the Gaussian-copula conditional failure probability, rank-based
//! probability-integral transforms, and two couplings for discrete risk
//! scores (interval-uniform and odds-ratio table).

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Clamp a probability to the open unit interval, half a machine epsilon
/// away from each end, so downstream quantile calls stay finite.
pub fn clamp_unit(u: f64) -> f64 {
    u.clamp(0.5 * f64::EPSILON, 1.0 - 0.5 * f64::EPSILON)
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

// Rational approximation regions for the normal quantile (relative error
// below 1.15e-9 everywhere before polishing).
const QA: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const QB: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const QC: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const QD: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

fn quantile_tail(q: f64) -> f64 {
    (((((QC[0] * q + QC[1]) * q + QC[2]) * q + QC[3]) * q + QC[4]) * q + QC[5])
        / ((((QD[0] * q + QD[1]) * q + QD[2]) * q + QD[3]) * q + 1.0)
}

/// Standard normal quantile: rational approximation plus one Newton step.
///
/// Errors outside the open interval (0,1); callers that hold ranks or
/// empirical CDF values pass them through [`clamp_unit`] first.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs p in (0,1), got {p}"
        )));
    }
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        quantile_tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -quantile_tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((QA[0] * r + QA[1]) * r + QA[2]) * r + QA[3]) * r + QA[4]) * r + QA[5]) * q
            / (((((QB[0] * r + QB[1]) * r + QB[2]) * r + QB[3]) * r + QB[4]) * r + 1.0)
    };
    // One Newton step against the high-precision CDF squares the error.
    let pdf = std_normal_pdf(x);
    if pdf > 0.0 {
        let e = std_normal_cdf(x) - p;
        let step = e / pdf;
        if step.is_finite() {
            return Ok(x - step);
        }
    }
    Ok(x)
}

/// Conditional failure probability under a Gaussian copula tying the outcome
/// to the risk-score rank: `Phi((Phi^-1(g) - rho * Phi^-1(u_h)) / sqrt(1 - rho^2))`.
///
/// `g` is the marginal discrete-time hazard, `u_h` the individual's
/// conditional risk-score CDF value, and `rho` in (-1, 0] the latent normal
/// correlation (more negative means high-risk-score individuals fail
/// sooner). Averaged over `u_h ~ Uniform(0,1)` this returns exactly `g`,
/// which is what makes generated data marginally compatible with the MSM.
pub fn copula_conditional_failure_prob(g: f64, rho: f64, u_h: f64) -> Result<f64> {
    validate_rho(rho)?;
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::Domain(format!(
            "conditional failure needs hazard g in (0,1), got {g}"
        )));
    }
    if !(u_h > 0.0 && u_h < 1.0) {
        return Err(Error::Domain(format!(
            "conditional failure needs u_h in (0,1), got {u_h}"
        )));
    }
    if rho == 0.0 {
        return Ok(g);
    }
    let z_g = std_normal_quantile(g)?;
    let z_h = std_normal_quantile(u_h)?;
    Ok(std_normal_cdf((z_g - rho * z_h) / (1.0 - rho * rho).sqrt()))
}

pub(crate) fn validate_rho(rho: f64) -> Result<()> {
    if !(rho > -1.0 && rho <= 0.0) {
        return Err(Error::Domain(format!(
            "copula correlation must lie in (-1, 0], got {rho}"
        )));
    }
    Ok(())
}

/// One latent copula draw.
#[derive(Debug, Clone, Copy)]
pub struct CopulaDraw {
    /// Normal score of the risk-score rank.
    pub z_h: f64,
    /// Latent outcome normal, correlated `rho` with `z_h`.
    pub z_y: f64,
    /// Uniform outcome variable; failure occurs when `u_y` falls below the
    /// marginal hazard.
    pub u_y: f64,
}

/// Sample the latent outcome coordinate given the risk-score rank `u_h`.
pub fn copula_sample(rho: f64, u_h: f64, rng: &mut ChaCha8Rng) -> Result<CopulaDraw> {
    validate_rho(rho)?;
    let z_h = std_normal_quantile(clamp_unit(u_h))?;
    let noise: f64 = rng.sample(rand_distr::StandardNormal);
    let z_y = rho * z_h + (1.0 - rho * rho).sqrt() * noise;
    Ok(CopulaDraw {
        z_h,
        z_y,
        u_y: std_normal_cdf(z_y),
    })
}

/// Ranks (1-based) of `scores`, ties broken by an independent uniform draw
/// per element. One uniform is consumed per element whether or not ties are
/// present, so stream positions do not depend on the score values.
pub fn tie_broken_ranks(scores: &[f64], rng: &mut ChaCha8Rng) -> Vec<u32> {
    let m = scores.len();
    let tie: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let mut idx: Vec<u32> = (0..m as u32).collect();
    idx.sort_by(|&i, &j| {
        let a = (scores[i as usize], tie[i as usize]);
        let b = (scores[j as usize], tie[j as usize]);
        a.partial_cmp(&b).expect("risk scores must not be NaN")
    });
    let mut rank = vec![0u32; m];
    for (pos, &i) in idx.iter().enumerate() {
        rank[i as usize] = pos as u32 + 1;
    }
    rank
}

/// Jittered empirical probability-integral transform of a pool of scores:
/// element `i` maps to `(rank_i - W_i) / m` with `W_i ~ Uniform(0,1)`.
///
/// Draw order is fixed: `m` tie-break uniforms, then `m` jitters, both in
/// element order. Outputs are strictly inside (0,1) after clamping, exactly
/// uniform when the scores are exchangeable, and invariant (bit for bit)
/// under strictly increasing transforms of the scores.
pub fn rank_jitter_quantiles(scores: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = scores.len() as f64;
    let ranks = tie_broken_ranks(scores, rng);
    ranks
        .iter()
        .map(|&r| {
            let w: f64 = rng.random();
            clamp_unit((r as f64 - w) / m)
        })
        .collect()
}

/// Interval-uniform coupling for a discrete risk score: given the observed
/// score level `h` and the conditional CDF of the score, draw
/// `u ~ Uniform(F(h-1), F(h))`.
///
/// Errors when the interval has zero or negative width (degenerate support
/// at `h`), or when the CDF values leave [0, 1].
pub fn discrete_quantile_option1(
    h: i64,
    cdf_at: impl Fn(i64) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let lo = cdf_at(h - 1);
    let hi = cdf_at(h);
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::Domain(format!(
            "discrete score CDF outside [0,1]: F({})={lo}, F({h})={hi}",
            h - 1
        )));
    }
    if !(hi > lo) {
        return Err(Error::Domain(format!(
            "degenerate support at score level {h}: F({})={lo}, F({h})={hi}",
            h - 1
        )));
    }
    Ok(lo + (hi - lo) * rng.random::<f64>())
}

/// 2 x J probability table coupling the failure indicator (rows: Y=0 on row
/// 0, Y=1 on row 1) with a discrete risk score (columns).
#[derive(Debug, Clone)]
pub struct OddsRatioTable {
    /// `cells[y][j]`, nonnegative, summing to one.
    pub cells: [Vec<f64>; 2],
}

impl OddsRatioTable {
    pub fn n_levels(&self) -> usize {
        self.cells[0].len()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        self.cells[0][j] + self.cells[1][j]
    }

    /// Local odds ratio between adjacent columns j and j+1.
    pub fn local_odds_ratio(&self, j: usize) -> f64 {
        (self.cells[0][j] * self.cells[1][j + 1]) / (self.cells[0][j + 1] * self.cells[1][j])
    }
}

/// Odds-ratio coupling for a discrete risk score: build the 2 x J joint
/// table with given failure-row mass `marginal_y0`, score marginals, and
/// local odds ratios between adjacent score levels.
///
/// J = 2 uses the closed-form (Plackett) root; larger J starts from a table
/// with the requested local odds ratios and rescales rows and columns
/// iteratively (which preserves those ratios) until both margins match to
/// 1e-10, capped at 10^4 sweeps.
pub fn odds_ratio_table_option2(
    marginal_y0: f64,
    marginals_h: &[f64],
    odds_ratios: &[f64],
) -> Result<OddsRatioTable> {
    let j_levels = marginals_h.len();
    if j_levels == 0 {
        return Err(Error::Domain("score marginals are empty".into()));
    }
    if odds_ratios.len() + 1 != j_levels {
        return Err(Error::Domain(format!(
            "need {} odds ratios for {} score levels, got {}",
            j_levels - 1,
            j_levels,
            odds_ratios.len()
        )));
    }
    if !(0.0..=1.0).contains(&marginal_y0) {
        return Err(Error::Domain(format!(
            "failure-row mass must lie in [0,1], got {marginal_y0}"
        )));
    }
    let h_sum: f64 = marginals_h.iter().sum();
    if marginals_h.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (h_sum - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!(
            "score marginals must be probabilities summing to one (sum = {h_sum})"
        )));
    }
    if odds_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Domain("odds ratios must be positive finite".into()));
    }

    // Degenerate rows need no coupling.
    if marginal_y0 == 0.0 || marginal_y0 == 1.0 || j_levels == 1 {
        let row0: Vec<f64> = marginals_h.iter().map(|p| p * marginal_y0).collect();
        let row1: Vec<f64> = marginals_h.iter().map(|p| p * (1.0 - marginal_y0)).collect();
        return Ok(OddsRatioTable { cells: [row0, row1] });
    }

    if j_levels == 2 {
        let (p1, q1, psi) = (marginal_y0, marginals_h[0], odds_ratios[0]);
        let p00 = if (psi - 1.0).abs() < 1e-12 {
            p1 * q1
        } else {
            let s = 1.0 + (p1 + q1) * (psi - 1.0);
            let disc = s * s - 4.0 * psi * (psi - 1.0) * p1 * q1;
            (s - disc.max(0.0).sqrt()) / (2.0 * (psi - 1.0))
        };
        let cells = [
            vec![p00, p1 - p00],
            vec![q1 - p00, 1.0 - p1 - q1 + p00],
        ];
        let mut table = OddsRatioTable { cells };
        sanitize_cells(&mut table)?;
        return Ok(table);
    }

    // Seed table already carrying the target local odds ratios
    // (cells[0][j] * cells[1][j+1]) / (cells[0][j+1] * cells[1][j]) = psi_j:
    // with row 1 flat, row0[j] / row0[j+1] must equal psi_j.
    let mut row0 = vec![1.0; j_levels];
    for j in 1..j_levels {
        row0[j] = row0[j - 1] / odds_ratios[j - 1];
    }
    let mut table = OddsRatioTable {
        cells: [row0, vec![1.0; j_levels]],
    };
    let row_targets = [marginal_y0, 1.0 - marginal_y0];
    let mut converged = false;
    for _ in 0..10_000 {
        for (row, &target) in table.cells.iter_mut().zip(&row_targets) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                let f = target / s;
                row.iter_mut().for_each(|c| *c *= f);
            }
        }
        for j in 0..j_levels {
            let s = table.col_sum(j);
            let f = if s > 0.0 { marginals_h[j] / s } else { 0.0 };
            table.cells[0][j] *= f;
            table.cells[1][j] *= f;
        }
        let mut disc: f64 = 0.0;
        for (row, &target) in table.cells.iter().zip(&row_targets) {
            disc = disc.max((row.iter().sum::<f64>() - target).abs());
        }
        for j in 0..j_levels {
            disc = disc.max((table.col_sum(j) - marginals_h[j]).abs());
        }
        if disc < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(
            "iterative proportional fitting hit the 10^4 sweep cap before both margins matched to 1e-10".into(),
        ));
    }
    // Rescaling preserves local odds ratios exactly in real arithmetic;
    // verify floating-point drift stayed below 1e-8 relative.
    for (j, &psi) in odds_ratios.iter().enumerate() {
        if marginals_h[j] == 0.0 || marginals_h[j + 1] == 0.0 {
            continue;
        }
        let got = table.local_odds_ratio(j);
        if !got.is_finite() || (got - psi).abs() > 1e-8 * psi {
            return Err(Error::NonConvergence(format!(
                "local odds ratio {j} drifted: target {psi}, fitted {got}"
            )));
        }
    }
    sanitize_cells(&mut table)?;
    Ok(table)
}

// Clamp floating-point dust below zero; reject genuinely infeasible tables.
fn sanitize_cells(table: &mut OddsRatioTable) -> Result<()> {
    for row in &mut table.cells {
        for c in row.iter_mut() {
            if *c < -1e-9 {
                return Err(Error::Domain(format!(
                    "odds-ratio table has negative cell {c}; marginals and ratios are incompatible"
                )));
            }
            *c = c.max(0.0);
        }
    }
    Ok(())
}

/// Conditional failure probability P(Y = 0 | H = level j) from a coupling
/// table. Errors when the column carries no mass.
pub fn conditional_failure_from_table(table: &OddsRatioTable, j: usize) -> Result<f64> {
    if j >= table.n_levels() {
        return Err(Error::Domain(format!(
            "score level {j} out of range for {}-column table",
            table.n_levels()
        )));
    }
    let s = table.col_sum(j);
    if s <= 0.0 {
        return Err(Error::Domain(format!("score level {j} has zero mass")));
    }
    Ok(table.cells[0][j] / s)
}
