//! Built-in scenarios.
//!
//! All presets share one confounding structure over ten visits: two observed
//! baselines (`x1` normal, `x2` Bernoulli), two oracle-only baselines
//! (`b1`, `b2`), a normal confounder `l1` and a Bernoulli confounder `l2`
//! whose dynamics respond to past treatment, and a logistic treatment
//! process with strong persistence. The risk score loads on the oracle
//! baselines and the current confounders, so treatment and outcome share an
//! unobserved-frailty pathway that a naive fit cannot remove.
//!
//! * `logistic-low|medium|high`: discrete-time logistic MSM with intercept
//!   -4.1 / -2.5 / -1.2 (about 90% / 50% / 10% of an untreated x=0 cohort
//!   surviving all ten visits), effects (0.5 x1, 0.5 x2, -1 a), rho -0.9,
//!   no censoring.
//! * `cox-<delta>-<rho>` for delta, rho in low/high: piecewise-constant
//!   proportional-hazard MSM read in continuous time, baseline hazard
//!   exp(-3.3), effects (0.5 x1, 0.5 x2, -1 a, -0.4 x1*a), independent
//!   exponential censoring at rate exp(-3.6). `delta` scales the
//!   treatment-assignment coefficients (confounding strength); `rho` is
//!   -0.5 (low) or -0.9 (high).

use super::*;

/// Names accepted by [`builtin_scenario`].
pub fn preset_names() -> &'static [&'static str] {
    &[
        "logistic-low",
        "logistic-medium",
        "logistic-high",
        "cox-low-low",
        "cox-low-high",
        "cox-high-low",
        "cox-high-high",
    ]
}

/// Build a named preset scenario.
pub fn builtin_scenario(name: &str) -> Result<ScenarioSpec> {
    let spec = match name {
        "logistic-low" => logistic(name, -4.1),
        "logistic-medium" => logistic(name, -2.5),
        "logistic-high" => logistic(name, -1.2),
        "cox-low-low" => cox(name, Delta::Low, -0.5),
        "cox-low-high" => cox(name, Delta::Low, -0.9),
        "cox-high-low" => cox(name, Delta::High, -0.5),
        "cox-high-high" => cox(name, Delta::High, -0.9),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(spec)
}

fn lp(intercept: f64, terms: &[(f64, &str)]) -> LinearPredictor {
    LinearPredictor {
        intercept,
        terms: terms
            .iter()
            .map(|&(coef, var)| LpTerm {
                coef,
                var: var.to_string(),
            })
            .collect(),
    }
}

enum Delta {
    Low,
    High,
}

impl Delta {
    fn coefs(&self) -> [f64; 5] {
        match self {
            // (x1, x2, b1, l1, l2) in the treatment logit.
            Delta::Low => [0.1, 0.15, 0.1, 0.3, 0.3],
            Delta::High => [0.2, 0.3, 0.2, 0.6, 0.6],
        }
    }
}

// Covariate, confounder, treatment and risk-score structure shared by all
// presets; only the MSM, rho, censoring and treatment strength differ.
fn skeleton(label: &str, delta: Delta, rho: f64) -> ScenarioSpec {
    let [d1, d2, d3, d4, d5] = delta.coefs();
    ScenarioSpec {
        visits: 10,
        baseline_x: vec![
            BaselineSpec {
                name: "x1".into(),
                kind: VarKind::Normal,
                model: lp(0.0, &[]),
                sd: 1.0,
            },
            BaselineSpec {
                name: "x2".into(),
                kind: VarKind::Bernoulli,
                model: lp(0.0, &[]),
                sd: 1.0,
            },
        ],
        baseline_b: vec![
            BaselineSpec {
                name: "b1".into(),
                kind: VarKind::Normal,
                model: lp(-0.2, &[(0.4, "x2")]),
                sd: 1.0,
            },
            BaselineSpec {
                name: "b2".into(),
                kind: VarKind::Normal,
                model: lp(0.0, &[(0.2, "x1")]),
                sd: 1.0,
            },
        ],
        confounders: vec![
            ConfounderSpec {
                name: "l1".into(),
                kind: VarKind::Normal,
                init: Some(lp(0.0, &[(0.2, "x1")])),
                transition: Some(lp(
                    0.3,
                    &[(0.4, "b2"), (0.7, "l1.lag1"), (-0.6, "a.lag1")],
                )),
                model: None,
                sd: 1.0,
            },
            ConfounderSpec {
                name: "l2".into(),
                kind: VarKind::Bernoulli,
                init: Some(lp(-0.2, &[(0.4, "x2")])),
                transition: Some(lp(
                    -0.2,
                    &[(0.4, "b2"), (1.0, "l2.lag1"), (-0.6, "a.lag1")],
                )),
                model: None,
                sd: 1.0,
            },
        ],
        treatment: TreatmentSpec {
            kind: TreatmentKind::BinaryLogistic,
            model: lp(
                -1.0,
                &[
                    (d1, "x1"),
                    (d2, "x2"),
                    (d3, "b1"),
                    (d4, "l1"),
                    (d5, "l2"),
                    (1.0, "a.lag1"),
                ],
            ),
            sd: 1.0,
        },
        msm: MsmSpec {
            link: MsmLink::Logit,
            baseline: ScalarOrPerVisit::Scalar(-2.5),
            terms: vec![],
            continuous_time: false,
        },
        risk_score: RiskScoreSpec {
            terms: [(0.3, "b1"), (0.5, "b2"), (1.0, "l1"), (1.0, "l2")]
                .iter()
                .map(|&(coef, var)| ScoreTermSpec {
                    coef: Some(coef),
                    coef_by_treatment: None,
                    var: var.to_string(),
                })
                .collect(),
            discrete: false,
            extension: None,
        },
        rho: ScalarOrPerVisit::Scalar(rho),
        censoring: None,
        pool: PoolSpec {
            m: 1000,
            restart_fraction: 0.1,
            restart_m: None,
        },
        seed: None,
        label: Some(label.to_string()),
    }
}

fn msm_terms(terms: &[(f64, &[&str])]) -> Vec<MsmTermSpec> {
    terms
        .iter()
        .map(|&(coef, product)| MsmTermSpec {
            coef,
            product: product.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

fn logistic(label: &str, intercept: f64) -> ScenarioSpec {
    let mut spec = skeleton(label, Delta::High, -0.9);
    spec.msm = MsmSpec {
        link: MsmLink::Logit,
        baseline: ScalarOrPerVisit::Scalar(intercept),
        terms: msm_terms(&[
            (0.5, &["x1"]),
            (0.5, &["x2"]),
            (-1.0, &["a"]),
        ]),
        continuous_time: false,
    };
    spec
}

fn cox(label: &str, delta: Delta, rho: f64) -> ScenarioSpec {
    let mut spec = skeleton(label, delta, rho);
    spec.msm = MsmSpec {
        link: MsmLink::Cloglog,
        baseline: ScalarOrPerVisit::Scalar((-3.3f64).exp()),
        terms: msm_terms(&[
            (0.5, &["x1"]),
            (0.5, &["x2"]),
            (-1.0, &["a"]),
            (-0.4, &["x1", "a"]),
        ]),
        continuous_time: true,
    };
    spec.censoring = Some(CensoringSpec {
        rate: (-3.6f64).exp(),
    });
    spec
}
