//! Matched-pool engine.
//!
//! Each sampled individual is simulated alongside a private pool of matches
//! that share its baseline `x` and its realised treatment path but draw
//! their own `b` and confounder trajectories. At every visit the pool's
//! ranked risk scores turn the individual's score into an (approximately)
//! uniform conditional CDF value, which the Gaussian copula then couples to
//! the failure indicator. Failed matches are replaced by copies of
//! surviving matches; when too few distinct originals remain, the pool is
//! rebuilt at a larger size and the shared history is replayed for the
//! matches only.
//!
//! Stream discipline: the individual's own draws (covariates, treatment,
//! rank jitter `W`, copula residual) come from per-role streams that never
//! depend on the pool size or the pool stream's salt, and each stream
//! advances exactly one step per decided visit. Runs that differ only in
//! pool configuration therefore share every individual-level draw, which is
//! what makes agreement studies across pool sizes meaningful.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    pool_failure_split, replace_failed_members, sample_b, sample_censoring, sample_l,
    sample_treatment, sample_x, EngineOptions, MatchPool,
};
use crate::numeric::{clamp_unit, std_normal_cdf, std_normal_quantile, tie_broken_ranks};
use crate::record::IndividualRecord;
use crate::rng::Streams;
use crate::scenario::EvalCtx;
use crate::{Error, Result};

pub(super) fn simulate_individual(
    sc: &crate::scenario::CompiledScenario,
    streams: Streams,
    opts: &EngineOptions,
) -> Result<IndividualRecord> {
    let mut cov_rng = streams.covariates();
    let mut treat_rng = streams.treatment();
    let mut jitter_rng = streams.jitter();
    let mut copula_rng = streams.copula();
    let mut pool_rng = streams.pool(opts.pool_salt);

    let visits = sc.visits();
    let k_max = sc.k_max();
    let n_l = sc.n_l();
    let hook = opts.score_hook.as_deref();
    let continuous = sc.is_continuous_time();

    // The sampled individual.
    let x = sample_x(sc, &mut cov_rng);
    let b = sample_b(sc, &x, &mut cov_rng);
    let mut l_hist: Vec<f64> = Vec::with_capacity(visits * n_l);
    let mut a_hist: Vec<f64> = Vec::with_capacity(visits);
    let mut risk_quantiles: Vec<f64> = Vec::new();
    let mut failure_visit: Option<u32> = None;
    let mut failure_time: Option<f64> = None;

    // Reused buffers.
    let mut scores: Vec<f64> = Vec::new();
    let mut l_scratch: Vec<f64> = Vec::new();
    let mut failed: Vec<usize> = Vec::new();
    let mut survivors: Vec<usize> = Vec::new();
    let mut ident_scratch: Vec<usize> = Vec::new();

    let mut pool = MatchPool::new(sc.n_b(), n_l);
    pool.rebuild(sc.spec.pool.m - 1, sc, &x, &mut pool_rng, &mut l_scratch);
    let mut pool_total = sc.spec.pool.m;

    // Visits with index below this are already decided for the individual
    // and are replayed for the matches only (after a pool restart).
    let mut decided_through: usize = 0;
    let mut restarts: u32 = 0;

    let mut k = 0usize;
    loop {
        let replay = k < decided_through;
        let a_lag = if k == 0 { 0.0 } else { a_hist[k - 1] };

        if !replay {
            // Individual's confounders, then treatment.
            {
                let l_lag = if k == 0 {
                    &[][..]
                } else {
                    &l_hist[(k - 1) * n_l..k * n_l]
                };
                sample_l(sc, &x, &b, l_lag, a_lag, k, &mut cov_rng, &mut l_scratch);
            }
            l_hist.extend_from_slice(&l_scratch);
            let a_k = match &opts.forced_regime {
                Some(regime) => regime[k],
                None => {
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
                    sample_treatment(sc, &ctx, &mut treat_rng)
                }
            };
            a_hist.push(a_k);
        }
        let a_k = a_hist[k];

        // Matches' confounders (their own history, the individual's
        // treatment path).
        pool.advance_l(sc, &x, a_lag, k, &mut pool_rng, &mut l_scratch);

        // Risk scores: individual at index 0, matches after.
        scores.clear();
        let slot_ctx = EvalCtx {
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
        scores.push(sc.eval_score(&slot_ctx, a_k, hook)?);
        pool.extend_scores(sc, &x, a_lag, a_k, k, hook, &mut scores)?;

        let ranks = tie_broken_ranks(&scores, &mut pool_rng);
        let m_f = pool_total as f64;
        let g = sc.eval_g(k, &a_hist[..=k], &x)?;
        let rho = sc.rho_at(k);

        // Individual's failure decision. Replayed visits are already
        // decided, and skipping them here is what keeps the jitter and
        // copula streams at exactly one draw per visit however the pool
        // behaves.
        if !replay {
            let w: f64 = jitter_rng.random();
            let eps: f64 = copula_rng.sample(StandardNormal);
            let u_h = clamp_unit((ranks[0] as f64 - w) / m_f);
            let z_y =
                rho * std_normal_quantile(u_h)? + (1.0 - rho * rho).sqrt() * eps;
            let u_y = std_normal_cdf(z_y);
            if opts.record_risk_quantiles {
                risk_quantiles.push(u_h);
            }
            if u_y < g {
                failure_visit = Some(k as u32 + 1);
                failure_time = Some(if continuous {
                    k as f64 + (1.0 - u_y).ln() / (1.0 - g).ln()
                } else {
                    (k + 1) as f64
                });
            }
            decided_through = k + 1;
        }

        // Stop on the individual's failure or at the final visit, before any
        // match replacement.
        if failure_visit.is_some() || k == k_max {
            break;
        }

        // Matches' failure decisions and replacement.
        pool_failure_split(
            pool.len(),
            &ranks,
            1,
            m_f,
            g,
            rho,
            &mut pool_rng,
            &mut failed,
            &mut survivors,
        )?;
        if !failed.is_empty() {
            if survivors.is_empty() {
                return Err(Error::PoolExhausted(format!(
                    "all {} matches failed at visit {} (individual {}); \
                     increase pool m (currently {})",
                    pool.len(),
                    k + 1,
                    streams.id,
                    sc.spec.pool.m
                )));
            }
            replace_failed_members(&mut pool, &failed, &survivors, &mut pool_rng);
        }

        // Restart check (fresh visits only): too few distinct originals left
        // means the pool no longer represents the survivor distribution
        // well, so rebuild larger and replay the decided visits for matches
        // only.
        if !replay
            && (pool.unique_idents(&mut ident_scratch) as f64)
                <= sc.spec.pool.restart_fraction * pool_total as f64
        {
            restarts += 1;
            log::debug!(
                "individual {}: pool restart {} at visit {} (pool {} -> {})",
                streams.id,
                restarts,
                k,
                pool_total,
                sc.spec.pool.restart_size()
            );
            pool_total = sc.spec.pool.restart_size();
            pool.rebuild(pool_total - 1, sc, &x, &mut pool_rng, &mut l_scratch);
            k = 0;
            continue;
        }

        k += 1;
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
        restarts,
    })
}
