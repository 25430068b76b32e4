//! Expansion of simulated cohorts into person-period (pooled) tables.
//!
//! Each individual contributes one row per visit while still at risk and
//! under observation. Failures are ascertained at the end of each interval:
//! an individual whose censoring draw lands strictly inside an interval
//! contributes no row for it, even if the failure time would have fallen
//! earlier in the same interval. Administrative censoring at the final visit
//! is implicit because rows never extend past the scheduled visits.

use crate::record::IndividualRecord;
use crate::scenario::CompiledScenario;
use crate::{Error, Result};

/// A single variable available to person-period regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarRef {
    /// Baseline covariate `x[i]` (conditioned on by the marginal model).
    X(usize),
    /// Oracle baseline `b[i]`.
    B(usize),
    /// Time-varying confounder `l[i]` at the row's visit.
    L(usize),
    /// Confounder `l[i]` at the previous visit (0 at the first visit).
    LLag(usize),
    /// Treatment at the row's visit.
    A,
    /// Treatment at the previous visit (0 at the first visit).
    ALag,
    /// The visit index itself, as a real number.
    K,
}

/// One regressor column: a product of variables (empty product = constant 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RegTerm {
    pub name: String,
    pub factors: Vec<VarRef>,
}

impl RegTerm {
    pub fn new(name: impl Into<String>, factors: Vec<VarRef>) -> Self {
        RegTerm {
            name: name.into(),
            factors,
        }
    }
}

/// How the baseline hazard enters the design matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterceptKind {
    /// One shared intercept column.
    Shared,
    /// One indicator column per scheduled visit (a separate intercept for
    /// each visit).
    PerVisit,
}

/// Which event the outcome column encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOutcome {
    /// Failure in the row's interval `(k, k+1]`.
    Failure,
    /// Treatment received at the row's visit (for weight models).
    Treatment,
}

/// A pooled person-period design: row-major regressors plus outcome,
/// cluster id, visit index, and a per-row weight (1 until reweighted).
#[derive(Clone, Debug, PartialEq)]
pub struct PersonPeriodTable {
    pub col_names: Vec<String>,
    pub n_cols: usize,
    /// Row-major matrix, `n_rows × n_cols`.
    pub xs: Vec<f64>,
    pub y: Vec<f64>,
    pub id: Vec<u64>,
    pub visit: Vec<u32>,
    pub weight: Vec<f64>,
}

impl PersonPeriodTable {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.xs[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn var_value(rec: &IndividualRecord, var: VarRef, k: usize, n_l: usize) -> f64 {
    match var {
        VarRef::X(i) => rec.x[i],
        VarRef::B(i) => rec.b[i],
        VarRef::L(i) => rec.l[k * n_l + i],
        VarRef::LLag(i) => {
            if k == 0 {
                0.0
            } else {
                rec.l[(k - 1) * n_l + i]
            }
        }
        VarRef::A => rec.a[k],
        VarRef::ALag => {
            if k == 0 {
                0.0
            } else {
                rec.a[k - 1]
            }
        }
        VarRef::K => k as f64,
    }
}

fn check_terms(sc: &CompiledScenario, terms: &[RegTerm]) -> Result<()> {
    for t in terms {
        for &f in &t.factors {
            let ok = match f {
                VarRef::X(i) => i < sc.n_x(),
                VarRef::B(i) => i < sc.n_b(),
                VarRef::L(i) | VarRef::LLag(i) => i < sc.n_l(),
                VarRef::A | VarRef::ALag | VarRef::K => true,
            };
            if !ok {
                return Err(Error::Estimation(format!(
                    "regressor {:?} references a variable index outside the scenario",
                    t.name
                )));
            }
        }
    }
    Ok(())
}

/// Expand a cohort into a pooled table. Column order: the intercept block
/// (one shared column, or one indicator per visit) followed by `terms` in
/// the order given.
pub fn expand_person_period(
    cohort: &[IndividualRecord],
    sc: &CompiledScenario,
    terms: &[RegTerm],
    intercepts: InterceptKind,
    outcome: RowOutcome,
) -> Result<PersonPeriodTable> {
    check_terms(sc, terms)?;
    let visits = sc.visits();
    let n_l = sc.n_l();
    let n_int = match intercepts {
        InterceptKind::Shared => 1,
        InterceptKind::PerVisit => visits,
    };
    let n_cols = n_int + terms.len();

    let mut col_names = Vec::with_capacity(n_cols);
    match intercepts {
        InterceptKind::Shared => col_names.push("intercept".into()),
        InterceptKind::PerVisit => {
            col_names.extend((0..visits).map(|k| format!("visit_{k}")));
        }
    }
    col_names.extend(terms.iter().map(|t| t.name.clone()));

    let mut xs = Vec::new();
    let mut y = Vec::new();
    let mut id = Vec::new();
    let mut visit = Vec::new();

    for rec in cohort {
        let censor_limit = rec.censor_draw.unwrap_or(f64::INFINITY);
        for k in 0..visits {
            if !rec.alive_at(k) {
                break;
            }
            if ((k + 1) as f64) > censor_limit {
                break;
            }
            match intercepts {
                InterceptKind::Shared => xs.push(1.0),
                InterceptKind::PerVisit => {
                    xs.extend((0..visits).map(|j| f64::from(j == k)));
                }
            }
            for t in terms {
                let v = t
                    .factors
                    .iter()
                    .map(|&f| var_value(rec, f, k, n_l))
                    .product::<f64>();
                xs.push(v);
            }
            y.push(match outcome {
                RowOutcome::Failure => f64::from(rec.failure_visit == Some((k + 1) as u32)),
                RowOutcome::Treatment => rec.a[k],
            });
            id.push(rec.id);
            visit.push(k as u32);
        }
    }

    let n_rows = y.len();
    Ok(PersonPeriodTable {
        col_names,
        n_cols,
        xs,
        y,
        id,
        visit,
        weight: vec![1.0; n_rows],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    fn sc3() -> CompiledScenario {
        let json = r#"{
            "visits": 3,
            "baseline_x": [{"name":"x1","kind":"bernoulli","model":{}}],
            "baseline_b": [],
            "confounders": [{"name":"l1","kind":"normal","model":{}}],
            "treatment": {"kind":"binary-logistic","model":{}},
            "msm": {"link":"logit","baseline":-2.0,"terms":[{"coef":-0.5,"product":["a"]}]},
            "risk_score": {"terms":[{"coef":1.0,"var":"l1"}]},
            "rho": -0.5,
            "pool": {"m": 10}
        }"#;
        parse_scenario(json).unwrap().compile().unwrap()
    }

    fn rec(
        id: u64,
        x: f64,
        l: [f64; 3],
        a: [f64; 3],
        failure_visit: Option<u32>,
        censor: Option<f64>,
    ) -> IndividualRecord {
        let attended = failure_visit.map_or(3, |v| v as usize);
        IndividualRecord {
            id,
            x: vec![x],
            b: vec![],
            l: l[..attended].to_vec(),
            a: a[..attended].to_vec(),
            failure_visit,
            failure_time: failure_visit.map(f64::from),
            censor_draw: censor,
            risk_quantiles: vec![],
            restarts: 0,
        }
    }

    #[test]
    fn hand_built_cohort_expands_to_the_expected_table() {
        let sc = sc3();
        // One failure in (2,3], one censored at 1.5, one full survivor.
        let cohort = vec![
            rec(0, 1.0, [0.1, 0.2, 0.3], [1.0, 0.0, 1.0], Some(3), None),
            rec(1, 0.0, [0.4, 0.5, 0.6], [0.0, 1.0, 0.0], None, Some(1.5)),
            rec(2, 1.0, [0.7, 0.8, 0.9], [1.0, 1.0, 1.0], None, None),
        ];
        let terms = vec![
            RegTerm::new("x1", vec![VarRef::X(0)]),
            RegTerm::new("a", vec![VarRef::A]),
            RegTerm::new("x1*k", vec![VarRef::X(0), VarRef::K]),
            RegTerm::new("l1", vec![VarRef::L(0)]),
            RegTerm::new("a.lag1", vec![VarRef::ALag]),
        ];
        let t = expand_person_period(
            &cohort,
            &sc,
            &terms,
            InterceptKind::PerVisit,
            RowOutcome::Failure,
        )
        .unwrap();

        assert_eq!(t.n_cols, 3 + 5);
        assert_eq!(
            t.col_names,
            ["visit_0", "visit_1", "visit_2", "x1", "a", "x1*k", "l1", "a.lag1"]
        );
        // Individual 0: three rows (fails in the last interval); individual 1:
        // one row (censored inside (1,2]); individual 2: three rows.
        assert_eq!(t.id, [0, 0, 0, 1, 2, 2, 2]);
        assert_eq!(t.visit, [0, 1, 2, 0, 0, 1, 2]);
        assert_eq!(t.y, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.weight, vec![1.0; 7]);
        // Spot-check full rows.
        assert_eq!(t.row(0), [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.1, 0.0]);
        assert_eq!(t.row(1), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.2, 1.0]);
        assert_eq!(t.row(2), [0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.3, 0.0]);
        assert_eq!(t.row(3), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.0]);
        assert_eq!(t.row(6), [0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.9, 1.0]);
    }

    #[test]
    fn treatment_outcome_and_shared_intercept() {
        let sc = sc3();
        let cohort = vec![rec(7, 1.0, [0.1, 0.2, 0.3], [1.0, 0.0, 1.0], Some(2), None)];
        let t = expand_person_period(
            &cohort,
            &sc,
            &[RegTerm::new("a.lag1", vec![VarRef::ALag])],
            InterceptKind::Shared,
            RowOutcome::Treatment,
        )
        .unwrap();
        assert_eq!(t.col_names, ["intercept", "a.lag1"]);
        assert_eq!(t.y, [1.0, 0.0]); // the realised treatments
        assert_eq!(t.row(0), [1.0, 0.0]);
        assert_eq!(t.row(1), [1.0, 1.0]);
    }

    #[test]
    fn censoring_exactly_at_a_visit_keeps_the_interval() {
        let sc = sc3();
        let cohort = vec![rec(0, 0.0, [0.0; 3], [0.0; 3], None, Some(2.0))];
        let t = expand_person_period(
            &cohort,
            &sc,
            &[],
            InterceptKind::Shared,
            RowOutcome::Failure,
        )
        .unwrap();
        assert_eq!(t.visit, [0, 1]); // intervals ending at 1 and 2 observed
    }

    #[test]
    fn out_of_range_regressors_are_rejected() {
        let sc = sc3();
        let err = expand_person_period(
            &[],
            &sc,
            &[RegTerm::new("bogus", vec![VarRef::B(0)])],
            InterceptKind::Shared,
            RowOutcome::Failure,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
