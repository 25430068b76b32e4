//! Direct engine: per-visit conditional risk-score CDFs are read from
//! pre-estimated quantile grids instead of being ranked inside a live pool.
//! Apart from that substitution, the visit loop, the copula coupling, and
//! every stream position match the matched engine, so the two engines can be
//! compared draw-for-draw under one seed.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{sample_b, sample_censoring, sample_l, sample_treatment, sample_x, EngineOptions};
use crate::numeric::{std_normal_cdf, std_normal_quantile};
use crate::record::IndividualRecord;
use crate::risk_cdf::{grid_lookup, GridKey, GridSet};
use crate::rng::Streams;
use crate::scenario::{CompiledScenario, EvalCtx};
use crate::{Error, Result};

/// Generate one individual, looking every conditional CDF up in `grids`.
pub fn simulate_individual_known_cdf(
    sc: &CompiledScenario,
    grids: &GridSet,
    streams: Streams,
    opts: &EngineOptions,
) -> Result<IndividualRecord> {
    let mut cov_rng = streams.covariates();
    let mut treat_rng = streams.treatment();
    let mut copula_rng = streams.copula();

    let visits = sc.visits();
    let n_l = sc.n_l();
    let hook = opts.score_hook.as_deref();
    let continuous = sc.is_continuous_time();

    let x = sample_x(sc, &mut cov_rng);
    let b = sample_b(sc, &x, &mut cov_rng);
    let mut l_hist: Vec<f64> = Vec::with_capacity(visits * n_l);
    let mut a_hist: Vec<f64> = Vec::with_capacity(visits);
    let mut risk_quantiles: Vec<f64> = Vec::new();
    let mut failure_visit: Option<u32> = None;
    let mut failure_time: Option<f64> = None;
    let mut l_scratch: Vec<f64> = Vec::new();

    for k in 0..visits {
        let a_lag = if k == 0 { 0.0 } else { a_hist[k - 1] };
        {
            let l_lag = if k == 0 {
                &[][..]
            } else {
                &l_hist[(k - 1) * n_l..k * n_l]
            };
            sample_l(sc, &x, &b, l_lag, a_lag, k, &mut cov_rng, &mut l_scratch);
        }
        l_hist.extend_from_slice(&l_scratch);
        let ctx = EvalCtx {
            x: &x,
            b: &b,
            l_cur: &l_hist[k * n_l..(k + 1) * n_l],
            l_lag: if k == 0 {
                &[][..]
            } else {
                &l_hist[(k - 1) * n_l..k * n_l]
            },
            a_lag,
            k,
        };
        let a_k = match &opts.forced_regime {
            Some(regime) => regime[k],
            None => sample_treatment(sc, &ctx, &mut treat_rng),
        };
        a_hist.push(a_k);

        let h = sc.eval_score(&ctx, a_k, hook)?;
        let key = GridKey::from_values(&x, &a_hist[..=k]);
        let grid = grids.get(&key).ok_or_else(|| {
            Error::MissingGrid(format!(
                "no grid for covariate pattern {:#b}, visit {}, treatment path {:#b}; \
                 estimate grids for this scenario first",
                key.x_bits, key.k, key.a_bits
            ))
        })?;
        let u_h = grid_lookup(grid, h);
        if opts.record_risk_quantiles {
            risk_quantiles.push(u_h);
        }

        let g = sc.eval_g(k, &a_hist[..=k], &x)?;
        let rho = sc.rho_at(k);
        let eps: f64 = copula_rng.sample(StandardNormal);
        let z_y = rho * std_normal_quantile(u_h)? + (1.0 - rho * rho).sqrt() * eps;
        let u_y = std_normal_cdf(z_y);
        if u_y < g {
            failure_visit = Some(k as u32 + 1);
            failure_time = Some(if continuous {
                k as f64 + (1.0 - u_y).ln() / (1.0 - g).ln()
            } else {
                (k + 1) as f64
            });
            break;
        }
    }

    let censor_draw = sc
        .censor_rate()
        .map(|rate| sample_censoring(rate, &mut streams.censoring()));

    Ok(IndividualRecord {
        id: streams.id,
        x,
        b,
        l: l_hist,
        a: a_hist,
        failure_visit,
        failure_time,
        censor_draw,
        risk_quantiles,
        restarts: 0,
    })
}

/// Generate `n` individuals with the direct engine. Deterministic in
/// `(scenario, grids, n, root_seed, options)` regardless of worker threads.
pub fn simulate_cohort_known_cdf(
    sc: &CompiledScenario,
    grids: &GridSet,
    n: usize,
    root_seed: u64,
    opts: &EngineOptions,
) -> Result<Vec<IndividualRecord>> {
    if let Some(r) = &opts.forced_regime {
        if r.len() != sc.visits() {
            return Err(Error::Scenario(format!(
                "forced regime must give one treatment per visit ({}), got {}",
                sc.visits(),
                r.len()
            )));
        }
    }
    (0..n as u64)
        .into_par_iter()
        .map(|id| simulate_individual_known_cdf(sc, grids, Streams::new(root_seed, id), opts))
        .collect()
}
