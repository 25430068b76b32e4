//! Stabilised inverse-probability-of-treatment weights.
//!
//! Two pooled logistic treatment models are fitted on the same
//! person-period rows as the outcome model: a denominator model conditioning
//! on the full measured history, and a numerator model restricted to
//! baseline covariates and treatment history. The weight at visit `k` is
//! the running product over visits `j <= k` of the numerator over
//! denominator predicted probabilities of the treatment actually received.

use super::glm::{fit_pooled_binary, BinaryLink, FitResult};
use super::person_period::{
    expand_person_period, InterceptKind, PersonPeriodTable, RegTerm, RowOutcome,
};
use crate::record::IndividualRecord;
use crate::scenario::{CompiledScenario, TreatmentKind};
use crate::{Error, Result};

/// Denominator probabilities below this trigger the extreme-weight counter
/// (weights themselves are never truncated).
pub const EXTREME_PROB: f64 = 1e-12;

/// Per-row stabilised weights plus the treatment fits behind them.
#[derive(Clone, Debug)]
pub struct StabilizedWeights {
    /// One weight per person-period row, in expansion order.
    pub weights: Vec<f64>,
    /// Rows whose denominator probability fell below [`EXTREME_PROB`].
    pub extreme_rows: usize,
    pub denominator_fit: FitResult,
    pub numerator_fit: FitResult,
}

/// Predicted probability of the treatment actually received on each row.
pub(crate) fn realized_probs(table: &PersonPeriodTable, fit: &FitResult) -> Vec<f64> {
    (0..table.n_rows())
        .map(|r| {
            let eta: f64 = table
                .row(r)
                .iter()
                .zip(&fit.coef)
                .map(|(x, b)| x * b)
                .sum();
            let mu = 1.0 / (1.0 + (-eta.clamp(-35.0, 35.0)).exp());
            if table.y[r] != 0.0 {
                mu
            } else {
                1.0 - mu
            }
        })
        .collect()
}

/// Running product of `num / den` within each individual; `visits` marks
/// row boundaries (a row at visit 0 starts a new individual).
pub(crate) fn cumulative_ratio_products(
    visits: &[u32],
    num_p: &[f64],
    den_p: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(visits.len());
    let mut prod = 1.0;
    for r in 0..visits.len() {
        if visits[r] == 0 {
            prod = 1.0;
        }
        prod *= num_p[r] / den_p[r];
        out.push(prod);
    }
    out
}

/// Fit the two treatment models on `cohort` and return one stabilised
/// weight per person-period row. Both models get per-visit intercepts on
/// top of the supplied regressors.
pub fn stabilized_weights(
    cohort: &[IndividualRecord],
    sc: &CompiledScenario,
    denominator_terms: &[RegTerm],
    numerator_terms: &[RegTerm],
) -> Result<StabilizedWeights> {
    if sc.treatment.kind != TreatmentKind::BinaryLogistic {
        return Err(Error::Estimation(
            "stabilised treatment weights require a binary treatment".into(),
        ));
    }
    let den_table = expand_person_period(
        cohort,
        sc,
        denominator_terms,
        InterceptKind::PerVisit,
        RowOutcome::Treatment,
    )?;
    let den_fit = fit_pooled_binary(&den_table, BinaryLink::Logit, None)?;
    if !den_fit.converged {
        return Err(Error::NonConvergence(
            "denominator treatment model did not converge".into(),
        ));
    }
    let den_p = realized_probs(&den_table, &den_fit);

    let num_table = expand_person_period(
        cohort,
        sc,
        numerator_terms,
        InterceptKind::PerVisit,
        RowOutcome::Treatment,
    )?;
    let num_fit = fit_pooled_binary(&num_table, BinaryLink::Logit, None)?;
    if !num_fit.converged {
        return Err(Error::NonConvergence(
            "numerator treatment model did not converge".into(),
        ));
    }
    let num_p = realized_probs(&num_table, &num_fit);

    let extreme_rows = den_p.iter().filter(|&&p| p < EXTREME_PROB).count();
    if extreme_rows > 0 {
        log::warn!(
            "{extreme_rows} person-period rows have treatment probabilities below \
             {EXTREME_PROB:e}; the resulting weights are extreme and left untruncated"
        );
    }
    let weights = cumulative_ratio_products(&den_table.visit, &num_p, &den_p);
    Ok(StabilizedWeights {
        weights,
        extreme_rows,
        denominator_fit: den_fit,
        numerator_fit: num_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_cohort, EngineOptions};
    use crate::estimate::person_period::VarRef;
    use crate::scenario::parse_scenario;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_visit_ratio_is_plain_arithmetic() {
        // One individual, one visit, treated: 0.4 / 0.8 = 0.5.
        let w = cumulative_ratio_products(&[0], &[0.4], &[0.8]);
        assert_eq!(w, [0.5]);
    }

    #[test]
    fn products_accumulate_and_reset_per_individual() {
        let visits = [0u32, 1, 2, 0, 1];
        let num = [0.5, 0.6, 0.9, 0.3, 0.8];
        let den = [0.25, 0.3, 0.45, 0.6, 0.4];
        let w = cumulative_ratio_products(&visits, &num, &den);
        // w_k = w_{k-1} * num_k / den_k within each individual.
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[3], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[4], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_numerator_and_denominator_models_give_unit_weights() {
        let json = r#"{
            "visits": 3,
            "baseline_x": [{"name":"x1","kind":"bernoulli","model":{}}],
            "baseline_b": [],
            "confounders": [{"name":"l1","kind":"normal",
                "init":{},
                "transition":{"terms":[{"coef":0.5,"var":"l1.lag1"},{"coef":-0.3,"var":"a.lag1"}]}}],
            "treatment": {"kind":"binary-logistic",
                "model":{"intercept":-0.3,"terms":[{"coef":0.5,"var":"x1"},{"coef":0.4,"var":"l1"}]}},
            "msm": {"link":"logit","baseline":-2.0,"terms":[{"coef":-0.5,"product":["a"]}]},
            "risk_score": {"terms":[{"coef":1.0,"var":"l1"}]},
            "rho": -0.5,
            "pool": {"m": 30}
        }"#;
        let sc = parse_scenario(json).unwrap().compile().unwrap();
        let cohort = simulate_cohort(&sc, 80, 3, &EngineOptions::default()).unwrap();
        let terms = vec![
            RegTerm::new("x1", vec![VarRef::X(0)]),
            RegTerm::new("l1", vec![VarRef::L(0)]),
            RegTerm::new("a.lag1", vec![VarRef::ALag]),
        ];
        let sw = stabilized_weights(&cohort, &sc, &terms, &terms).unwrap();
        assert_eq!(sw.extreme_rows, 0);
        for &w in &sw.weights {
            assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
        }
    }
}
