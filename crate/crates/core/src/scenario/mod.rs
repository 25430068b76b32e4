//! Scenario schema: the user-facing declaration of a data-generating law.
//!
//! A scenario fixes, in causal order: baseline covariates `x*` (observed by
//! the analyst) and `b*` (oracle-only frailty proxies), time-varying
//! confounders `l*`, a treatment process `a`, the target marginal structural
//! model for the counterfactual failure hazard, a risk score that orders
//! individuals by frailty, and the copula correlation `rho` tying that
//! ordering to the outcome.
//!
//! Linear predictors reference variables by name; the suffix `.lag1` means
//! the previous visit's value (zero at visit 0, matching "no treatment
//! before entry"). Validation resolves every name against the factorization
//! order, so a confounder can depend on baselines, earlier-listed current
//! confounders and any lagged value, while the treatment model can also use
//! the visit index `k`. The MSM itself may reference only `x*`, current and
//! lagged treatment, and `k`: conditioning it on confounders would change
//! the estimand.

mod presets;

pub use presets::{builtin_scenario, preset_names};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_sd() -> f64 {
    1.0
}

/// Distribution family of a generated variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarKind {
    /// Normal with linear-predictor mean and fixed `sd`.
    Normal,
    /// Bernoulli with logistic linear predictor.
    Bernoulli,
}

/// Coefficient on a named variable inside a linear predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpTerm {
    pub coef: f64,
    pub var: String,
}

/// Intercept plus linear terms.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPredictor {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<LpTerm>,
}

/// Baseline covariate: `x*` entries are analyst-observed, `b*` entries are
/// oracle-only (they feed the risk score and confounder dynamics but must
/// stay out of any fitted model's design).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub name: String,
    pub kind: VarKind,
    /// Normal mean or Bernoulli logit, over earlier baseline variables.
    pub model: LinearPredictor,
    #[serde(default = "default_sd")]
    pub sd: f64,
}

/// Time-varying confounder. Either give `init` (visit 0) plus `transition`
/// (visits 1..), or a single `model` shared by all visits; a shared model
/// may reference `a.lag1` (zero at visit 0) but not lagged confounders.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfounderSpec {
    pub name: String,
    pub kind: VarKind,
    #[serde(default)]
    pub init: Option<LinearPredictor>,
    #[serde(default)]
    pub transition: Option<LinearPredictor>,
    #[serde(default)]
    pub model: Option<LinearPredictor>,
    #[serde(default = "default_sd")]
    pub sd: f64,
}

/// Treatment assignment process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreatmentKind {
    /// Binary treatment with logistic assignment probability.
    BinaryLogistic,
    /// Continuous dose, normal around a linear predictor.
    Normal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentSpec {
    pub kind: TreatmentKind,
    /// Over `x*`, `b*`, current `l*`, lagged values and the visit index `k`.
    pub model: LinearPredictor,
    #[serde(default = "default_sd")]
    pub sd: f64,
}

/// Link function of the marginal structural model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsmLink {
    /// Discrete-time hazard on the logit scale.
    Logit,
    /// Proportional hazard: per-visit baseline hazard times exp(lp); the
    /// interval failure probability is `1 - exp(-hazard)`.
    Cloglog,
    /// Additive hazard: baseline plus lp, which must stay positive.
    AdditiveHazard,
}

/// A number, or one value per visit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrPerVisit {
    Scalar(f64),
    PerVisit(Vec<f64>),
}

impl ScalarOrPerVisit {
    fn broadcast(&self, visits: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrPerVisit::Scalar(v) => Ok(vec![*v; visits]),
            ScalarOrPerVisit::PerVisit(vs) => {
                if vs.len() != visits {
                    return Err(Error::Scenario(format!(
                        "{what} must have one value per visit ({visits}), got {}",
                        vs.len()
                    )));
                }
                Ok(vs.clone())
            }
        }
    }
}

/// One MSM term: coefficient times a product of factors. Factors may be
/// `x*` names, `a` (current treatment), `a.lag1`, or `k` (visit index).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmTermSpec {
    pub coef: f64,
    pub product: Vec<String>,
}

/// The target marginal structural model: the counterfactual probability of
/// failing in interval `(k, k+1]` given survival to visit `k`, treatment
/// history and baseline `x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmSpec {
    pub link: MsmLink,
    /// Logit link: per-visit intercept. Hazard links: per-visit baseline
    /// hazard (positive). A scalar is broadcast to every visit.
    pub baseline: ScalarOrPerVisit,
    pub terms: Vec<MsmTermSpec>,
    /// Hazard links only: read the model in continuous time, so failure
    /// times get an exact within-interval location and the per-visit
    /// baseline is a piecewise-constant hazard.
    #[serde(default)]
    pub continuous_time: bool,
}

/// One risk-score term. Exactly one of `coef` (same coefficient regardless
/// of current treatment) or `coef_by_treatment` (`[when a=0, when a=1]`)
/// must be given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTermSpec {
    #[serde(default)]
    pub coef: Option<f64>,
    #[serde(default)]
    pub coef_by_treatment: Option<[f64; 2]>,
    pub var: String,
}

/// Risk score ordering individuals by frailty at each visit. May reference
/// `x*`, `b*`, current and lagged `l*`. Only its ranking matters to the
/// engines, never its scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskScoreSpec {
    pub terms: Vec<ScoreTermSpec>,
    /// Declares that the score takes finitely many values; the grid-based
    /// engine refuses such scores (the matched engine handles them).
    #[serde(default)]
    pub discrete: bool,
    /// Name of a caller-supplied score function that replaces the terms.
    #[serde(default)]
    pub extension: Option<String>,
}

/// Independent exponential censoring, applied after the outcome trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensoringSpec {
    pub rate: f64,
}

fn default_restart_fraction() -> f64 {
    0.1
}

/// Match-pool configuration for the matched engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    /// Pool size (the sampled individual plus `m - 1` matches).
    pub m: usize,
    /// Restart when the fraction of distinct match identities drops to or
    /// below this value.
    #[serde(default = "default_restart_fraction")]
    pub restart_fraction: f64,
    /// Pool size used after a restart; defaults to `20 * m`.
    #[serde(default)]
    pub restart_m: Option<usize>,
}

impl PoolSpec {
    pub fn restart_size(&self) -> usize {
        self.restart_m.unwrap_or(20 * self.m)
    }
}

fn default_pool() -> PoolSpec {
    PoolSpec {
        m: 5000,
        restart_fraction: default_restart_fraction(),
        restart_m: None,
    }
}

/// Complete scenario declaration. See the crate docs and
/// `docs/scenario-schema.md` for the JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Number of scheduled visits; visit indices run `0..visits`, and
    /// failure is assessed after each visit.
    pub visits: usize,
    pub baseline_x: Vec<BaselineSpec>,
    #[serde(default)]
    pub baseline_b: Vec<BaselineSpec>,
    #[serde(default)]
    pub confounders: Vec<ConfounderSpec>,
    pub treatment: TreatmentSpec,
    pub msm: MsmSpec,
    pub risk_score: RiskScoreSpec,
    /// Copula correlation in (-1, 0], scalar or per visit.
    pub rho: ScalarOrPerVisit,
    #[serde(default)]
    pub censoring: Option<CensoringSpec>,
    #[serde(default = "default_pool")]
    pub pool: PoolSpec,
    /// Root seed used when the caller does not supply one.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Free-form label echoed into reports; presets set their own name.
    #[serde(default)]
    pub label: Option<String>,
}

/// Parse a scenario from JSON. Schema errors (unknown fields, wrong types)
/// surface here; semantic validation happens in [`ScenarioSpec::compile`].
pub fn parse_scenario(json: &str) -> Result<ScenarioSpec> {
    Ok(serde_json::from_str(json)?)
}

/// SHA-256 of the canonical JSON serialization, for run manifests.
pub fn scenario_digest(spec: &ScenarioSpec) -> String {
    let canon = serde_json::to_string(spec).expect("scenario serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Compiled form: every name resolved to an index, every per-visit value
// broadcast, all invariants checked.

/// Resolved variable reference usable at simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum VarRef {
    X(usize),
    B(usize),
    LCur(usize),
    LLag(usize),
    ALag,
    VisitK,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedLp {
    pub intercept: f64,
    pub terms: Vec<(f64, VarRef)>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedBaseline {
    pub kind: VarKind,
    pub lp: ResolvedLp,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedConfounder {
    pub kind: VarKind,
    pub init: ResolvedLp,
    pub transition: ResolvedLp,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedTreatment {
    pub kind: TreatmentKind,
    pub lp: ResolvedLp,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MsmFactor {
    X(usize),
    ACur,
    ALag,
    VisitK,
}

#[derive(Debug, Clone)]
pub(crate) struct ResolvedMsm {
    pub link: MsmLink,
    pub baseline: Vec<f64>,
    pub terms: Vec<(f64, Vec<MsmFactor>)>,
    pub continuous_time: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ResolvedScoreTerm {
    pub coef_a0: f64,
    pub coef_a1: f64,
    pub var: VarRef,
}

/// Validated, index-resolved scenario. All engines run off this form.
#[derive(Debug, Clone)]
pub struct CompiledScenario {
    pub spec: ScenarioSpec,
    pub(crate) x: Vec<ResolvedBaseline>,
    pub(crate) b: Vec<ResolvedBaseline>,
    pub(crate) l: Vec<ResolvedConfounder>,
    pub(crate) treatment: ResolvedTreatment,
    pub(crate) msm: ResolvedMsm,
    pub(crate) score: Vec<ResolvedScoreTerm>,
    pub(crate) score_extension: Option<String>,
    pub(crate) rho: Vec<f64>,
    pub(crate) censor_rate: Option<f64>,
    pub x_names: Vec<String>,
    pub b_names: Vec<String>,
    pub l_names: Vec<String>,
}

/// Variable values visible when evaluating a linear predictor at one visit.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EvalCtx<'a> {
    pub x: &'a [f64],
    pub b: &'a [f64],
    pub l_cur: &'a [f64],
    pub l_lag: &'a [f64],
    pub a_lag: f64,
    pub k: usize,
}

impl ResolvedLp {
    pub fn eval(&self, ctx: &EvalCtx) -> f64 {
        let mut v = self.intercept;
        for &(coef, var) in &self.terms {
            v += coef * lookup(var, ctx);
        }
        v
    }
}

// Lagged references read zero at visit 0: nothing happened before entry.
fn lookup(var: VarRef, ctx: &EvalCtx) -> f64 {
    match var {
        VarRef::X(i) => ctx.x[i],
        VarRef::B(i) => ctx.b[i],
        VarRef::LCur(i) => ctx.l_cur[i],
        VarRef::LLag(i) => {
            if ctx.k == 0 {
                0.0
            } else {
                ctx.l_lag[i]
            }
        }
        VarRef::ALag => {
            if ctx.k == 0 {
                0.0
            } else {
                ctx.a_lag
            }
        }
        VarRef::VisitK => ctx.k as f64,
    }
}

pub(crate) fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl ScenarioSpec {
    /// Validate the scenario and resolve every reference. Errors name the
    /// offending field.
    pub fn compile(&self) -> Result<CompiledScenario> {
        if self.visits == 0 {
            return Err(Error::Scenario("visits must be at least 1".into()));
        }
        let x_names: Vec<String> = self.baseline_x.iter().map(|v| v.name.clone()).collect();
        let b_names: Vec<String> = self.baseline_b.iter().map(|v| v.name.clone()).collect();
        let l_names: Vec<String> = self.confounders.iter().map(|v| v.name.clone()).collect();

        let mut seen = std::collections::HashSet::new();
        for name in x_names.iter().chain(&b_names).chain(&l_names) {
            check_name(name)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Scenario(format!("duplicate variable name {name:?}")));
            }
        }

        let resolver = Resolver {
            x: &x_names,
            b: &b_names,
            l: &l_names,
        };

        // Baselines may reference earlier-listed baselines only.
        let mut x = Vec::new();
        for (i, spec) in self.baseline_x.iter().enumerate() {
            check_sd(spec.kind, spec.sd, &spec.name)?;
            let lp = resolver.resolve_lp(
                &spec.model,
                &Scope::Baseline { n_x: i, n_b: 0 },
                &format!("baseline_x {:?}", spec.name),
            )?;
            x.push(ResolvedBaseline {
                kind: spec.kind,
                lp,
                sd: spec.sd,
            });
        }
        let mut b = Vec::new();
        for (i, spec) in self.baseline_b.iter().enumerate() {
            check_sd(spec.kind, spec.sd, &spec.name)?;
            let lp = resolver.resolve_lp(
                &spec.model,
                &Scope::Baseline {
                    n_x: x_names.len(),
                    n_b: i,
                },
                &format!("baseline_b {:?}", spec.name),
            )?;
            b.push(ResolvedBaseline {
                kind: spec.kind,
                lp,
                sd: spec.sd,
            });
        }

        // Confounders: init over (x, b, earlier current l); transition adds
        // lagged confounders and lagged treatment.
        let mut l = Vec::new();
        for (i, spec) in self.confounders.iter().enumerate() {
            check_sd(spec.kind, spec.sd, &spec.name)?;
            let what = format!("confounder {:?}", spec.name);
            let (init, transition) = match (&spec.model, &spec.init, &spec.transition) {
                (Some(shared), None, None) => {
                    let t = resolver.resolve_lp(shared, &Scope::Transition { n_l: i }, &what)?;
                    if t.terms.iter().any(|(_, v)| matches!(v, VarRef::LLag(_))) {
                        return Err(Error::Scenario(format!(
                            "{what}: a shared model may not reference lagged confounders; \
                             give separate init and transition blocks"
                        )));
                    }
                    (t.clone(), t)
                }
                (None, Some(init), Some(transition)) => (
                    resolver.resolve_lp(init, &Scope::Init { n_l: i }, &what)?,
                    resolver.resolve_lp(transition, &Scope::Transition { n_l: i }, &what)?,
                ),
                _ => {
                    return Err(Error::Scenario(format!(
                        "{what}: give either a shared `model` or both `init` and `transition`"
                    )))
                }
            };
            l.push(ResolvedConfounder {
                kind: spec.kind,
                init,
                transition,
                sd: spec.sd,
            });
        }

        // Treatment sees everything at the current visit plus the index k.
        if self.treatment.kind == TreatmentKind::Normal && !(self.treatment.sd > 0.0) {
            return Err(Error::Scenario("treatment sd must be positive".into()));
        }
        let treatment = ResolvedTreatment {
            kind: self.treatment.kind,
            lp: resolver.resolve_lp(&self.treatment.model, &Scope::Treatment, "treatment")?,
            sd: self.treatment.sd,
        };

        let msm = self.compile_msm(&resolver)?;

        // Risk score.
        let mut score = Vec::new();
        for term in &self.risk_score.terms {
            let (c0, c1) = match (term.coef, term.coef_by_treatment) {
                (Some(c), None) => (c, c),
                (None, Some([c0, c1])) => (c0, c1),
                _ => {
                    return Err(Error::Scenario(format!(
                        "risk score term on {:?}: give exactly one of coef or coef_by_treatment",
                        term.var
                    )))
                }
            };
            let var = resolver.resolve_var(&term.var, &Scope::Score, "risk_score")?;
            score.push(ResolvedScoreTerm {
                coef_a0: c0,
                coef_a1: c1,
                var,
            });
        }
        if score.is_empty() && self.risk_score.extension.is_none() {
            return Err(Error::Scenario(
                "risk score needs at least one term (or an extension hook)".into(),
            ));
        }

        let rho = self.rho.broadcast(self.visits, "rho")?;
        for &r in &rho {
            crate::numeric::validate_rho(r).map_err(|_| {
                Error::Scenario(format!("rho must lie in (-1, 0], got {r}"))
            })?;
        }

        if let Some(c) = &self.censoring {
            if !(c.rate > 0.0 && c.rate.is_finite()) {
                return Err(Error::Scenario(format!(
                    "censoring rate must be positive, got {}",
                    c.rate
                )));
            }
        }

        if self.pool.m < 2 {
            return Err(Error::Scenario(
                "pool m must be at least 2 (the individual plus one match)".into(),
            ));
        }
        if !(self.pool.restart_fraction > 0.0 && self.pool.restart_fraction < 1.0) {
            return Err(Error::Scenario(
                "pool restart_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if self.pool.restart_size() < self.pool.m {
            return Err(Error::Scenario(
                "pool restart_m must be at least m".into(),
            ));
        }
        if self.pool.m < 1000 && rho.iter().any(|&r| r <= -0.7) {
            log::warn!(
                "pool m = {} with copula dependence as strong as {:.2}: failure times \
                 become unstable below m = 1000; consider a larger pool",
                self.pool.m,
                rho.iter().cloned().fold(f64::INFINITY, f64::min)
            );
        }

        Ok(CompiledScenario {
            spec: self.clone(),
            x,
            b,
            l,
            treatment,
            msm,
            score,
            score_extension: self.risk_score.extension.clone(),
            rho,
            censor_rate: self.censoring.as_ref().map(|c| c.rate),
            x_names,
            b_names,
            l_names,
        })
    }

    fn compile_msm(&self, resolver: &Resolver) -> Result<ResolvedMsm> {
        let baseline = self.msm.baseline.broadcast(self.visits, "msm.baseline")?;
        match self.msm.link {
            MsmLink::Logit => {
                if self.msm.continuous_time {
                    return Err(Error::Scenario(
                        "continuous_time needs a hazard link (cloglog or additive-hazard)".into(),
                    ));
                }
            }
            MsmLink::Cloglog => {
                if baseline.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Scenario(
                        "cloglog baseline hazards must be positive".into(),
                    ));
                }
            }
            MsmLink::AdditiveHazard => {}
        }
        let mut terms = Vec::new();
        for t in &self.msm.terms {
            if t.product.is_empty() {
                return Err(Error::Scenario(
                    "msm term products must name at least one factor".into(),
                ));
            }
            let mut factors = Vec::new();
            for f in &t.product {
                let factor = match f.as_str() {
                    "a" => MsmFactor::ACur,
                    "a.lag1" => MsmFactor::ALag,
                    "k" => MsmFactor::VisitK,
                    name => match resolver.x.iter().position(|n| n == name) {
                        Some(i) => MsmFactor::X(i),
                        None => {
                            return Err(Error::Scenario(format!(
                                "msm term factor {name:?} must be a baseline_x name, \
                                 `a`, `a.lag1` or `k`; the MSM may not condition on \
                                 confounders or oracle baselines"
                            )))
                        }
                    },
                };
                factors.push(factor);
            }
            terms.push((t.coef, factors));
        }
        Ok(ResolvedMsm {
            link: self.msm.link,
            baseline,
            terms,
            continuous_time: self.msm.continuous_time,
        })
    }
}

fn check_name(name: &str) -> Result<()> {
    const RESERVED: &[&str] = &["a", "k", "y", "id", "weight", "t_event", "censored"];
    let mut chars = name.chars();
    let ok_first = chars.next().is_some_and(|c| c.is_ascii_lowercase());
    let ok_rest = chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    if !ok_first || !ok_rest {
        return Err(Error::Scenario(format!(
            "variable name {name:?} must match [a-z][a-z0-9_]*"
        )));
    }
    if RESERVED.contains(&name) {
        return Err(Error::Scenario(format!("variable name {name:?} is reserved")));
    }
    Ok(())
}

fn check_sd(kind: VarKind, sd: f64, name: &str) -> Result<()> {
    if kind == VarKind::Normal && !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Scenario(format!(
            "variable {name:?}: normal sd must be positive, got {sd}"
        )));
    }
    Ok(())
}

// What a linear predictor is allowed to reference, by position in the
// factorization order.
enum Scope {
    /// Baseline variable: earlier x's, then earlier b's.
    Baseline { n_x: usize, n_b: usize },
    /// Confounder at visit 0: x, b, earlier-listed current confounders.
    Init { n_l: usize },
    /// Confounder at visits >= 1: adds lagged confounders and `a.lag1`.
    Transition { n_l: usize },
    /// Treatment model: everything current plus lags plus `k`.
    Treatment,
    /// Risk score: x, b, current and lagged confounders.
    Score,
}

struct Resolver<'a> {
    x: &'a [String],
    b: &'a [String],
    l: &'a [String],
}

impl Resolver<'_> {
    fn resolve_lp(&self, lp: &LinearPredictor, scope: &Scope, what: &str) -> Result<ResolvedLp> {
        let mut terms = Vec::new();
        for t in &lp.terms {
            terms.push((t.coef, self.resolve_var(&t.var, scope, what)?));
        }
        Ok(ResolvedLp {
            intercept: lp.intercept,
            terms,
        })
    }

    fn resolve_var(&self, var: &str, scope: &Scope, what: &str) -> Result<VarRef> {
        let (base, lagged) = match var.strip_suffix(".lag1") {
            Some(stripped) => (stripped, true),
            None => (var, false),
        };
        let reject = |why: &str| -> Result<VarRef> {
            Err(Error::Scenario(format!(
                "{what}: cannot reference {var:?} here ({why})"
            )))
        };

        if base == "a" {
            return match (scope, lagged) {
                (Scope::Transition { .. } | Scope::Treatment, true) => Ok(VarRef::ALag),
                (Scope::Init { .. }, true) => Ok(VarRef::ALag), // reads 0 at visit 0
                _ => reject("treatment may only appear lagged, and not in baselines or the score"),
            };
        }
        if base == "k" && !lagged {
            return match scope {
                Scope::Treatment => Ok(VarRef::VisitK),
                _ => reject("the visit index is only available to the treatment model"),
            };
        }
        if let Some(i) = self.x.iter().position(|n| n == base) {
            if lagged {
                return reject("baseline variables have no lag");
            }
            if let Scope::Baseline { n_x, .. } = scope {
                if i >= *n_x {
                    return reject("baselines may only reference earlier-listed baselines");
                }
            }
            return Ok(VarRef::X(i));
        }
        if let Some(i) = self.b.iter().position(|n| n == base) {
            if lagged {
                return reject("baseline variables have no lag");
            }
            match scope {
                Scope::Baseline { n_b, .. } => {
                    if i >= *n_b {
                        return reject("baselines may only reference earlier-listed baselines");
                    }
                }
                _ => {}
            }
            return Ok(VarRef::B(i));
        }
        if let Some(i) = self.l.iter().position(|n| n == base) {
            return match scope {
                Scope::Baseline { .. } => reject("baselines precede the confounders"),
                Scope::Init { n_l } | Scope::Transition { n_l } if !lagged => {
                    if i >= *n_l {
                        reject("confounders may only reference earlier-listed current values")
                    } else {
                        Ok(VarRef::LCur(i))
                    }
                }
                Scope::Init { .. } => reject("lagged confounders are undefined at visit 0"),
                Scope::Transition { .. } => Ok(VarRef::LLag(i)),
                Scope::Treatment | Scope::Score => Ok(if lagged {
                    VarRef::LLag(i)
                } else {
                    VarRef::LCur(i)
                }),
            };
        }
        reject("unknown variable")
    }
}

impl CompiledScenario {
    /// Number of scheduled visits (indices `0..visits`).
    pub fn visits(&self) -> usize {
        self.spec.visits
    }

    /// Last visit index `K = visits - 1`.
    pub fn k_max(&self) -> usize {
        self.spec.visits - 1
    }

    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    pub fn n_b(&self) -> usize {
        self.b.len()
    }

    pub fn n_l(&self) -> usize {
        self.l.len()
    }

    pub fn rho_at(&self, k: usize) -> f64 {
        self.rho[k]
    }

    pub fn censor_rate(&self) -> Option<f64> {
        self.censor_rate
    }

    pub fn is_continuous_time(&self) -> bool {
        self.msm.continuous_time
    }

    /// Which oracle baseline variables the treatment process actually looks
    /// at. Anything the treatment model never references is invisible to an
    /// analyst modelling treatment assignment, and blinded exports drop it.
    pub fn observed_b_indices(&self) -> Vec<bool> {
        let mut seen = vec![false; self.b.len()];
        for &(_, var) in &self.treatment.lp.terms {
            if let VarRef::B(i) = var {
                seen[i] = true;
            }
        }
        seen
    }

    pub fn link(&self) -> MsmLink {
        self.msm.link
    }

    /// Marginal failure probability in interval `(k, k+1]` given survival
    /// to visit `k`, treatment history `a_hist = (a_0, ..., a_k)` and
    /// baseline `x`. This is the quantity the generated data must reproduce.
    pub fn eval_g(&self, k: usize, a_hist: &[f64], x: &[f64]) -> Result<f64> {
        if k >= self.spec.visits {
            return Err(Error::Domain(format!(
                "visit {k} out of range (scenario has {} visits)",
                self.spec.visits
            )));
        }
        if a_hist.len() != k + 1 {
            return Err(Error::Domain(format!(
                "treatment history must cover visits 0..={k} ({} values), got {}",
                k + 1,
                a_hist.len()
            )));
        }
        if x.len() != self.x.len() {
            return Err(Error::Domain(format!(
                "x has {} components, scenario defines {}",
                x.len(),
                self.x.len()
            )));
        }
        let mut lp = 0.0;
        for (coef, factors) in &self.msm.terms {
            let mut v = *coef;
            for f in factors {
                v *= match f {
                    MsmFactor::X(i) => x[*i],
                    MsmFactor::ACur => a_hist[k],
                    MsmFactor::ALag => {
                        if k == 0 {
                            0.0
                        } else {
                            a_hist[k - 1]
                        }
                    }
                    MsmFactor::VisitK => k as f64,
                };
            }
            lp += v;
        }
        let g = match self.msm.link {
            MsmLink::Logit => expit(self.msm.baseline[k] + lp),
            MsmLink::Cloglog => {
                let hazard = self.msm.baseline[k] * lp.exp();
                -(-hazard).exp_m1()
            }
            MsmLink::AdditiveHazard => {
                let hazard = self.msm.baseline[k] + lp;
                if !(hazard > 0.0) {
                    return Err(Error::InvalidHazard(format!(
                        "additive hazard {hazard} at visit {k} is not positive \
                         (baseline {}, linear predictor {lp})",
                        self.msm.baseline[k]
                    )));
                }
                -(-hazard).exp_m1()
            }
        };
        // Keep the contract g in (0,1) even under extreme linear predictors.
        Ok(crate::numeric::clamp_unit(g))
    }

    /// Per-interval hazard implied by the continuous-time reading, i.e. the
    /// constant intensity on `(k, k+1]`: `-ln(1 - g)`.
    pub fn interval_hazard(&self, k: usize, a_hist: &[f64], x: &[f64]) -> Result<f64> {
        Ok(-(1.0 - self.eval_g(k, a_hist, x)?).ln())
    }

    /// Evaluate the risk score for one member; `hook` overrides the terms
    /// when the scenario declares an extension.
    pub(crate) fn eval_score(
        &self,
        ctx: &EvalCtx,
        a_cur: f64,
        hook: Option<&crate::engine::ScoreHook>,
    ) -> Result<f64> {
        if let Some(name) = &self.score_extension {
            let Some(h) = hook else {
                return Err(Error::Scenario(format!(
                    "risk score extension {name:?} requires a caller-supplied score function"
                )));
            };
            return Ok(h(ctx.x, ctx.b, ctx.l_cur, ctx.l_lag, a_cur, ctx.k));
        }
        let treated = a_cur != 0.0;
        let mut v = 0.0;
        for t in &self.score {
            let coef = if treated { t.coef_a1 } else { t.coef_a0 };
            v += coef * lookup(t.var, ctx);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Frozen against 40-digit arithmetic.
    const G_COX_NEVER: f64 = 0.036211269286414283;
    const G_COX_ALWAYS: f64 = 0.013476921048622713;
    const EXPIT_M25: f64 = 0.07585818002124355;

    #[test]
    fn preset_logistic_medium_evaluates_g() {
        let sc = builtin_scenario("logistic-medium").unwrap().compile().unwrap();
        // x = 0: g = expit(-2.5) regardless of visit.
        let g = sc.eval_g(0, &[0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(g, EXPIT_M25, epsilon = 1e-12);
        // Treated at the current visit: -1 on the logit scale.
        let g1 = sc.eval_g(3, &[0.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(g1, expit(-3.5), epsilon = 1e-12);
        // x enters with coefficient 0.5 each.
        let gx = sc.eval_g(0, &[0.0], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(gx, expit(-1.5), epsilon = 1e-12);
    }

    #[test]
    fn preset_cox_evaluates_reference_hazards() {
        let sc = builtin_scenario("cox-high-high").unwrap().compile().unwrap();
        let g0 = sc.eval_g(0, &[0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(g0, G_COX_NEVER, epsilon = 1e-12);
        let g1 = sc.eval_g(5, &[1.0; 6], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(g1, G_COX_ALWAYS, epsilon = 1e-12);
        assert!(sc.is_continuous_time());
        // x1 interacts with treatment (coefficient -0.4).
        let gx = sc.eval_g(0, &[1.0], &[1.0, 0.0]).unwrap();
        let hazard = (-3.3f64).exp() * (0.5 - 1.0 - 0.4f64).exp();
        assert_relative_eq!(gx, 1.0 - (-hazard).exp(), epsilon = 1e-12);
    }

    #[test]
    fn additive_link_errors_on_nonpositive_hazard() {
        let mut spec = builtin_scenario("logistic-medium").unwrap();
        spec.msm = MsmSpec {
            link: MsmLink::AdditiveHazard,
            baseline: ScalarOrPerVisit::Scalar(0.05),
            terms: vec![MsmTermSpec {
                coef: -0.03,
                product: vec!["a".into()],
            }],
            continuous_time: false,
        };
        let sc = spec.compile().unwrap();
        let g = sc.eval_g(0, &[1.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(g, 1.0 - (-0.02f64).exp(), epsilon = 1e-12);
        // Push the hazard negative.
        spec.msm.terms[0].coef = -0.06;
        let sc = spec.compile().unwrap();
        assert!(matches!(
            sc.eval_g(0, &[1.0], &[0.0, 0.0]),
            Err(Error::InvalidHazard(_))
        ));
    }

    #[test]
    fn per_visit_baseline_indexes_by_visit() {
        let mut spec = builtin_scenario("logistic-medium").unwrap();
        let per_visit: Vec<f64> = (0..10).map(|k| -4.0 + 0.2 * k as f64).collect();
        spec.msm.baseline = ScalarOrPerVisit::PerVisit(per_visit.clone());
        let sc = spec.compile().unwrap();
        for (k, &b0) in per_visit.iter().enumerate() {
            let hist = vec![0.0; k + 1];
            assert_relative_eq!(
                sc.eval_g(k, &hist, &[0.0, 0.0]).unwrap(),
                expit(b0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn eval_g_rejects_bad_shapes() {
        let sc = builtin_scenario("logistic-medium").unwrap().compile().unwrap();
        assert!(sc.eval_g(0, &[0.0, 0.0], &[0.0, 0.0]).is_err()); // history too long
        assert!(sc.eval_g(2, &[0.0], &[0.0, 0.0]).is_err()); // too short
        assert!(sc.eval_g(10, &[0.0; 11], &[0.0, 0.0]).is_err()); // visit range
        assert!(sc.eval_g(0, &[0.0], &[0.0]).is_err()); // x arity
    }

    #[test]
    fn msm_terms_commute() {
        let mut spec = builtin_scenario("cox-low-low").unwrap();
        let sc1 = spec.compile().unwrap();
        spec.msm.terms.reverse();
        let sc2 = spec.compile().unwrap();
        let g1 = sc1.eval_g(4, &[1.0, 0.0, 1.0, 1.0, 0.0], &[0.7, 1.0]).unwrap();
        let g2 = sc2.eval_g(4, &[1.0, 0.0, 1.0, 1.0, 0.0], &[0.7, 1.0]).unwrap();
        assert_relative_eq!(g1, g2, epsilon = 1e-15);
    }

    #[test]
    fn validation_rejects_structural_mistakes() {
        let base = builtin_scenario("logistic-medium").unwrap();

        let mut bad = base.clone();
        bad.rho = ScalarOrPerVisit::Scalar(0.2);
        assert!(bad.compile().is_err());

        let mut bad = base.clone();
        bad.rho = ScalarOrPerVisit::PerVisit(vec![-0.5; 3]);
        assert!(bad.compile().is_err());

        let mut bad = base.clone();
        bad.msm.terms.push(MsmTermSpec {
            coef: 1.0,
            product: vec!["l1".into()],
        });
        assert!(bad.compile().is_err(), "MSM may not condition on confounders");

        let mut bad = base.clone();
        bad.msm.baseline = ScalarOrPerVisit::PerVisit(vec![-2.5; 9]);
        assert!(bad.compile().is_err(), "baseline length must match visits");

        let mut bad = base.clone();
        bad.confounders[0].transition.as_mut().unwrap().terms[0].var = "nope".into();
        assert!(bad.compile().is_err());

        let mut bad = base.clone();
        bad.pool.m = 1;
        assert!(bad.compile().is_err());

        let mut bad = base.clone();
        bad.treatment.model.terms.push(LpTerm {
            coef: 1.0,
            var: "a".into(),
        });
        assert!(bad.compile().is_err(), "treatment cannot depend on current a");

        let mut bad = base.clone();
        bad.baseline_b[0].model.terms.push(LpTerm {
            coef: 1.0,
            var: "l1".into(),
        });
        assert!(bad.compile().is_err(), "baselines precede confounders");

        let mut bad = base;
        bad.censoring = Some(CensoringSpec { rate: -1.0 });
        assert!(bad.compile().is_err());
    }

    #[test]
    fn cloglog_requires_positive_baseline_and_logit_rejects_continuous_time() {
        let mut spec = builtin_scenario("cox-low-low").unwrap();
        spec.msm.baseline = ScalarOrPerVisit::Scalar(0.0);
        assert!(spec.compile().is_err());

        let mut spec = builtin_scenario("logistic-low").unwrap();
        spec.msm.continuous_time = true;
        assert!(spec.compile().is_err());
    }

    #[test]
    fn parse_rejects_unknown_fields_and_roundtrips() {
        let spec = builtin_scenario("cox-high-low").unwrap();
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back = parse_scenario(&json).unwrap();
        let a = spec.compile().unwrap();
        let b = back.compile().unwrap();
        let g1 = a.eval_g(2, &[1.0, 1.0, 0.0], &[0.3, 1.0]).unwrap();
        let g2 = b.eval_g(2, &[1.0, 1.0, 0.0], &[0.3, 1.0]).unwrap();
        assert_relative_eq!(g1, g2);
        assert_eq!(scenario_digest(&spec), scenario_digest(&back));

        let corrupted = json.replace("\"rho\"", "\"rho_typo\"");
        assert!(parse_scenario(&corrupted).is_err());
    }

    #[test]
    fn unknown_preset_is_reported() {
        assert!(matches!(
            builtin_scenario("logistic-extreme"),
            Err(Error::UnknownPreset(_))
        ));
        for name in preset_names() {
            builtin_scenario(name).unwrap().compile().unwrap();
        }
    }

    #[test]
    fn score_switches_coefficients_by_current_treatment() {
        let mut spec = builtin_scenario("logistic-medium").unwrap();
        spec.risk_score.terms = vec![ScoreTermSpec {
            coef: None,
            coef_by_treatment: Some([1.0, 2.0]),
            var: "b1".into(),
        }];
        let sc = spec.compile().unwrap();
        let ctx = EvalCtx {
            x: &[0.0, 0.0],
            b: &[0.7, 0.0],
            l_cur: &[0.0, 0.0],
            l_lag: &[0.0, 0.0],
            a_lag: 0.0,
            k: 1,
        };
        assert_relative_eq!(sc.eval_score(&ctx, 0.0, None).unwrap(), 0.7);
        assert_relative_eq!(sc.eval_score(&ctx, 1.0, None).unwrap(), 1.4);
    }
}
