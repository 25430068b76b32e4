//! Weighted pooled binary regression by iteratively reweighted least
//! squares, with logit and complementary-log-log links, plus the
//! cluster-robust sandwich covariance used for repeated-measures data.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::person_period::PersonPeriodTable;
use crate::{Error, Result};

/// Link function for the conditional failure probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryLink {
    Logit,
    Cloglog,
}

impl BinaryLink {
    /// Clamp the linear predictor to where the inverse link is numerically
    /// exact and strictly inside (0,1).
    fn clamp_eta(self, eta: f64) -> f64 {
        match self {
            BinaryLink::Logit => eta.clamp(-35.0, 35.0),
            BinaryLink::Cloglog => eta.clamp(-35.0, 3.4),
        }
    }

    fn inv(self, eta: f64) -> f64 {
        match self {
            BinaryLink::Logit => 1.0 / (1.0 + (-eta).exp()),
            BinaryLink::Cloglog => -(-eta.exp()).exp_m1(),
        }
    }

    /// Per-row score factor `psi` such that the likelihood score is
    /// `sum_i w_i * psi_i * x_i`, and the Fisher weight `omega` such that
    /// the information is `sum_i w_i * omega_i * x_i x_i^T`.
    fn score_and_info(self, eta: f64, y: f64, mu: f64) -> (f64, f64) {
        match self {
            BinaryLink::Logit => (y - mu, mu * (1.0 - mu)),
            BinaryLink::Cloglog => {
                let e = eta.exp();
                ((y - mu) * e / mu, (1.0 - mu) * e * e / mu)
            }
        }
    }
}

/// A converged (or honestly non-converged) pooled binary fit.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub col_names: Vec<String>,
    pub coef: Vec<f64>,
    /// Inverse weighted Fisher information.
    pub model_cov: DMatrix<f64>,
    /// Cluster-robust (by individual id) sandwich covariance.
    pub sandwich_cov: DMatrix<f64>,
    pub converged: bool,
    pub iters: usize,
    pub log_lik: f64,
}

impl FitResult {
    pub fn model_se(&self) -> Vec<f64> {
        (0..self.coef.len())
            .map(|j| self.model_cov[(j, j)].max(0.0).sqrt())
            .collect()
    }

    pub fn sandwich_se(&self) -> Vec<f64> {
        (0..self.coef.len())
            .map(|j| self.sandwich_cov[(j, j)].max(0.0).sqrt())
            .collect()
    }
}

const MAX_ITERS: usize = 100;
const SEPARATION_BOUND: f64 = 30.0;
const SCORE_TOL: f64 = 1e-8;
const DEVIANCE_TOL: f64 = 1e-10;
const MU_FLOOR: f64 = 1e-15;

fn effective_weights<'a>(table: &'a PersonPeriodTable, weights: Option<&'a [f64]>) -> Result<&'a [f64]> {
    let w = weights.unwrap_or(&table.weight);
    if w.len() != table.n_rows() {
        return Err(Error::Estimation(format!(
            "{} weights for {} rows",
            w.len(),
            table.n_rows()
        )));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::Estimation(format!(
            "row weights must be positive and finite, found {bad}"
        )));
    }
    Ok(w)
}

/// Per-row means, score factors, information weights and the weighted
/// deviance at a coefficient vector.
struct RowState {
    mu: Vec<f64>,
    psi: Vec<f64>,
    omega: Vec<f64>,
    deviance: f64,
}

fn row_state(
    table: &PersonPeriodTable,
    link: BinaryLink,
    w: &[f64],
    coef: &[f64],
) -> RowState {
    let n = table.n_rows();
    let mut st = RowState {
        mu: vec![0.0; n],
        psi: vec![0.0; n],
        omega: vec![0.0; n],
        deviance: 0.0,
    };
    for r in 0..n {
        let row = table.row(r);
        let eta = link.clamp_eta(row.iter().zip(coef).map(|(x, b)| x * b).sum());
        let mu = link.inv(eta).clamp(MU_FLOOR, 1.0 - MU_FLOOR);
        let y = table.y[r];
        let (psi, omega) = link.score_and_info(eta, y, mu);
        st.mu[r] = mu;
        st.psi[r] = psi;
        st.omega[r] = omega;
        st.deviance -= 2.0 * w[r] * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln());
    }
    st
}

/// Weighted score vector and Fisher information at the current state.
fn score_and_information(
    table: &PersonPeriodTable,
    w: &[f64],
    st: &RowState,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = table.n_cols;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for r in 0..table.n_rows() {
        let row = table.row(r);
        let sw = w[r] * st.psi[r];
        let iw = w[r] * st.omega[r];
        for j in 0..p {
            score[j] += sw * row[j];
            let xj = iw * row[j];
            for l in j..p {
                info[(j, l)] += xj * row[l];
            }
        }
    }
    for j in 0..p {
        for l in 0..j {
            info[(j, l)] = info[(l, j)];
        }
    }
    (score, info)
}

/// Maximise the weighted binomial log-likelihood. Converges when the
/// relative deviance change drops below 1e-10 or the score sup-norm drops
/// below 1e-8; halves the step when the deviance worsens. Coefficients
/// diverging past 30 in absolute value are reported as separation, and a
/// singular information matrix as rank deficiency.
pub fn fit_pooled_binary(
    table: &PersonPeriodTable,
    link: BinaryLink,
    weights: Option<&[f64]>,
) -> Result<FitResult> {
    if table.is_empty() {
        return Err(Error::Estimation("cannot fit an empty table".into()));
    }
    let w = effective_weights(table, weights)?;
    let p = table.n_cols;
    let mut coef = vec![0.0; p];
    let mut st = row_state(table, link, w, &coef);
    let mut converged = false;
    let mut iters = 0;
    // Once the deviance stalls, allow a few more Newton steps so the score
    // collapses quadratically below its own tolerance before stopping.
    let mut polish_left: Option<usize> = None;

    while iters < MAX_ITERS {
        iters += 1;
        let (score, info) = score_and_information(table, w, &st);
        if score.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        if polish_left == Some(0) {
            break;
        }
        let chol = Cholesky::new(info).ok_or_else(|| {
            Error::Estimation(
                "information matrix is singular (rank-deficient design)".into(),
            )
        })?;
        let delta = chol.solve(&score);

        // Step-halving keeps the deviance non-increasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = coef
                .iter()
                .zip(delta.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            let trial_st = row_state(table, link, w, &trial);
            if trial_st.deviance <= st.deviance + st.deviance.abs() * 1e-14 + 1e-12 {
                let rel_change =
                    (st.deviance - trial_st.deviance).abs() / (st.deviance.abs() + 0.1);
                coef = trial;
                st = trial_st;
                accepted = true;
                polish_left = if rel_change < DEVIANCE_TOL {
                    Some(polish_left.map_or(5, |k| k.saturating_sub(1)))
                } else {
                    None
                };
                break;
            }
            step *= 0.5;
        }
        if let Some(j) = coef.iter().position(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::Estimation(format!(
                "separation suspected: coefficient {:?} diverged to {:.2}",
                table.col_names[j], coef[j]
            )));
        }
        if !accepted {
            // No step improves the deviance; check the score once more below.
            break;
        }
    }

    // Re-evaluate convergence on the score at the final coefficients.
    let (score, info) = score_and_information(table, w, &st);
    if score.amax() < SCORE_TOL {
        converged = true;
    }
    let chol = Cholesky::new(info).ok_or_else(|| {
        Error::Estimation("information matrix is singular (rank-deficient design)".into())
    })?;
    let model_cov = chol.inverse();
    let sandwich_cov = sandwich_from_state(table, w, &st, &model_cov);
    Ok(FitResult {
        col_names: table.col_names.clone(),
        coef,
        model_cov,
        sandwich_cov,
        converged,
        iters,
        log_lik: -0.5 * st.deviance,
    })
}

fn sandwich_from_state(
    table: &PersonPeriodTable,
    w: &[f64],
    st: &RowState,
    bread: &DMatrix<f64>,
) -> DMatrix<f64> {
    // Rows arrive grouped by individual, so clusters are contiguous runs;
    // accumulating run by run keeps the floating-point summation order (and
    // therefore the output bytes) identical across processes.
    let p = table.n_cols;
    let mut meat = DMatrix::zeros(p, p);
    let mut g: DVector<f64> = DVector::zeros(p);
    let mut current: Option<u64> = None;
    for r in 0..table.n_rows() {
        if current != Some(table.id[r]) {
            if current.is_some() {
                meat += &g * g.transpose();
            }
            current = Some(table.id[r]);
            g.fill(0.0);
        }
        let row = table.row(r);
        let sw = w[r] * st.psi[r];
        for j in 0..p {
            g[j] += sw * row[j];
        }
    }
    if current.is_some() {
        meat += &g * g.transpose();
    }
    bread * meat * bread
}

/// Cluster-robust covariance at given coefficients: the inverse information
/// (bread) wrapped around the sum over individuals of outer products of
/// their summed per-row scores (meat). Rows must be grouped by individual,
/// as every expansion in this crate guarantees. Ignores the uncertainty
/// from any upstream weight estimation.
pub fn sandwich_variance(
    table: &PersonPeriodTable,
    link: BinaryLink,
    weights: Option<&[f64]>,
    coef: &[f64],
) -> Result<DMatrix<f64>> {
    if coef.len() != table.n_cols {
        return Err(Error::Estimation(format!(
            "{} coefficients for {} columns",
            coef.len(),
            table.n_cols
        )));
    }
    let w = effective_weights(table, weights)?;
    let st = row_state(table, link, w, coef);
    let (_, info) = score_and_information(table, w, &st);
    let chol = Cholesky::new(info).ok_or_else(|| {
        Error::Estimation("information matrix is singular (rank-deficient design)".into())
    })?;
    let bread = chol.inverse();
    Ok(sandwich_from_state(table, w, &st, &bread))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Single-column-plus-intercept table with one row per cluster.
    fn two_col_table(z: &[f64], y: &[f64]) -> PersonPeriodTable {
        let n = z.len();
        let mut xs = Vec::with_capacity(2 * n);
        for &v in z {
            xs.push(1.0);
            xs.push(v);
        }
        PersonPeriodTable {
            col_names: vec!["intercept".into(), "z".into()],
            n_cols: 2,
            xs,
            y: y.to_vec(),
            id: (0..n as u64).collect(),
            visit: vec![0; n],
            weight: vec![1.0; n],
        }
    }

    fn intercept_only(y: &[f64]) -> PersonPeriodTable {
        let n = y.len();
        PersonPeriodTable {
            col_names: vec!["intercept".into()],
            n_cols: 1,
            xs: vec![1.0; n],
            y: y.to_vec(),
            id: (0..n as u64).collect(),
            visit: vec![0; n],
            weight: vec![1.0; n],
        }
    }

    #[test]
    fn saturated_two_by_two_logit_has_closed_form() {
        // 20/100 failures untreated, 50/100 treated.
        let mut z = vec![0.0; 100];
        z.extend(vec![1.0; 100]);
        let mut y = vec![1.0; 20];
        y.extend(vec![0.0; 80]);
        y.extend(vec![1.0; 50]);
        y.extend(vec![0.0; 50]);
        let t = two_col_table(&z, &y);
        let fit = fit_pooled_binary(&t, BinaryLink::Logit, None).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coef[0], -1.3862943611198906, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.coef[1], 1.3862943611198906, epsilon = 1e-8);
    }

    #[test]
    fn cloglog_intercept_only_matches_closed_form() {
        // Mean 0.3: intercept = ln(-ln(0.7)).
        let mut y = vec![1.0; 30];
        y.extend(vec![0.0; 70]);
        let t = intercept_only(&y);
        let fit = fit_pooled_binary(&t, BinaryLink::Cloglog, None).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coef[0], -1.0309304331587231, epsilon = 1e-8);
        assert_abs_diff_eq!(-2.0 * fit.log_lik, 122.17286041097869, epsilon = 1e-8);
    }

    #[test]
    fn balanced_independent_regressor_gets_zero_coefficient() {
        // Outcome exactly balanced within both regressor levels.
        let z: Vec<f64> = (0..100).map(|i| f64::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..100).map(|i| f64::from(i % 4 < 2)).collect();
        let t = two_col_table(&z, &y);
        for link in [BinaryLink::Logit, BinaryLink::Cloglog] {
            let fit = fit_pooled_binary(&t, link, None).unwrap();
            assert_abs_diff_eq!(fit.coef[1], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn integer_weights_match_replicated_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = z
            .iter()
            .map(|&v| f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-v as f64).exp())))
            .collect();
        let w: Vec<f64> = (0..60).map(|i| f64::from(1 + (i % 3) as u32)).collect();

        let weighted = two_col_table(&z, &y);
        let mut zr = Vec::new();
        let mut yr = Vec::new();
        for i in 0..60 {
            for _ in 0..w[i] as usize {
                zr.push(z[i]);
                yr.push(y[i]);
            }
        }
        let replicated = two_col_table(&zr, &yr);
        for link in [BinaryLink::Logit, BinaryLink::Cloglog] {
            let fa = fit_pooled_binary(&weighted, link, Some(&w)).unwrap();
            let fb = fit_pooled_binary(&replicated, link, None).unwrap();
            assert_abs_diff_eq!(fa.coef[0], fb.coef[0], epsilon = 1e-10);
            assert_abs_diff_eq!(fa.coef[1], fb.coef[1], epsilon = 1e-10);
            assert_abs_diff_eq!(fa.log_lik, fb.log_lik, epsilon = 1e-8);
        }
    }

    #[test]
    fn score_is_orthogonal_at_convergence_for_both_links() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = z
            .iter()
            .map(|&v| {
                let p = 1.0 - (-(-1.0f64 + 0.7 * v).exp()).exp();
                f64::from(rng.random::<f64>() < p)
            })
            .collect();
        let t = two_col_table(&z, &y);
        let w = vec![1.0; 500];
        for link in [BinaryLink::Logit, BinaryLink::Cloglog] {
            let fit = fit_pooled_binary(&t, link, None).unwrap();
            assert!(fit.converged, "{link:?} did not converge");
            let st = row_state(&t, link, &w, &fit.coef);
            let (score, _) = score_and_information(&t, &w, &st);
            assert!(
                score.amax() < 1e-8,
                "{link:?} score sup-norm {}",
                score.amax()
            );
        }
    }

    #[test]
    fn separation_is_reported_not_returned() {
        // Outcome identical to the regressor: the MLE is at infinity.
        let z: Vec<f64> = (0..40).map(|i| f64::from(i % 2 == 0)).collect();
        let t = two_col_table(&z, &z);
        let err = fit_pooled_binary(&t, BinaryLink::Logit, None).unwrap_err();
        assert!(err.to_string().contains("separation"), "{err}");
    }

    #[test]
    fn rank_deficiency_is_reported() {
        // Duplicate the regressor column.
        let z: Vec<f64> = (0..40).map(|i| f64::from(i % 2 == 0)).collect();
        let y: Vec<f64> = (0..40).map(|i| f64::from(i % 4 < 2)).collect();
        let mut xs = Vec::new();
        for &v in &z {
            xs.extend([1.0, v, v]);
        }
        let t = PersonPeriodTable {
            col_names: vec!["intercept".into(), "z".into(), "z_again".into()],
            n_cols: 3,
            xs,
            y,
            id: (0..40).collect(),
            visit: vec![0; 40],
            weight: vec![1.0; 40],
        };
        let err = fit_pooled_binary(&t, BinaryLink::Logit, None).unwrap_err();
        assert!(err.to_string().contains("singular"), "{err}");
    }

    #[test]
    fn sandwich_matches_brute_force_on_a_six_row_fixture() {
        // Three clusters of two rows each; moderate weights.
        let xs = vec![
            1.0, 0.2, //
            1.0, -0.4, //
            1.0, 1.1, //
            1.0, 0.6, //
            1.0, -0.9, //
            1.0, 0.3,
        ];
        let t = PersonPeriodTable {
            col_names: vec!["intercept".into(), "z".into()],
            n_cols: 2,
            xs,
            y: vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            id: vec![1, 1, 2, 2, 3, 3],
            visit: vec![0, 1, 0, 1, 0, 1],
            weight: vec![1.0; 6],
        };
        let w = [0.8, 1.2, 1.0, 0.5, 2.0, 1.5];
        let coef = [0.1, -0.3];

        let got = sandwich_variance(&t, BinaryLink::Logit, Some(&w), &coef).unwrap();

        // Brute force with dense matrices, written independently of the
        // accumulation code above.
        let x = DMatrix::from_row_slice(6, 2, &t.xs);
        let eta = &x * DVector::from_row_slice(&coef);
        let mu: DVector<f64> = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let mut info = DMatrix::zeros(2, 2);
        for r in 0..6 {
            let xr = x.row(r).transpose();
            info += w[r] * mu[r] * (1.0 - mu[r]) * &xr * xr.transpose();
        }
        let bread = info.try_inverse().unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for cluster in [1u64, 2, 3] {
            let mut g = DVector::zeros(2);
            for r in 0..6 {
                if t.id[r] == cluster {
                    g += w[r] * (t.y[r] - mu[r]) * x.row(r).transpose();
                }
            }
            meat += &g * g.transpose();
        }
        let expected = &bread * meat * &bread;
        for j in 0..2 {
            for l in 0..2 {
                assert_abs_diff_eq!(got[(j, l)], expected[(j, l)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sandwich_approaches_model_covariance_when_well_specified() {
        // One row per cluster, correctly specified logistic model: the
        // sandwich and model-based standard errors agree asymptotically.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let z: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let y: Vec<f64> = z
            .iter()
            .map(|&v| {
                let p = 1.0 / (1.0 + (-(-0.5 + 0.8 * v)).exp());
                f64::from(rng.random::<f64>() < p)
            })
            .collect();
        let t = two_col_table(&z, &y);
        let fit = fit_pooled_binary(&t, BinaryLink::Logit, None).unwrap();
        let m = fit.model_se();
        let s = fit.sandwich_se();
        for j in 0..2 {
            let ratio = s[j] / m[j];
            assert!(
                (0.9..=1.1).contains(&ratio),
                "column {j}: sandwich/model SE ratio {ratio}"
            );
        }
    }
}
