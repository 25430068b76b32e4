//! Pre-estimated risk-score CDF grids.
//!
//! When every baseline covariate in the scenario is binary and treatment is
//! binary, the conditional risk-score CDF given `(x, treatment path)` can be
//! estimated once per key by Monte Carlo and stored as a fixed grid of
//! quantiles. The direct engine then converts a member's score into its
//! conditional CDF value by interpolating the stored grid instead of ranking
//! it inside a live pool of matches.
//!
//! The estimation chain mirrors the matched engine's per-visit mechanics:
//! simulate `m` members under the fixed treatment path, record the quantiles
//! of their risk scores at each visit *before* that visit's failure update,
//! then decide failures through the same rank/jitter/copula coupling and
//! replace failed members with copies of survivors so the sample keeps
//! representing the survivor distribution.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::engine::{pool_failure_split, replace_failed_members, MatchPool, ScoreHook};
use crate::numeric::tie_broken_ranks;
use crate::rng::{derive_rng, mix_root, StreamRole};
use crate::scenario::{CompiledScenario, TreatmentKind, VarKind};
use crate::stats::quantile_sorted;
use crate::{Error, Result};

/// Number of probability probes each grid stores.
pub const PROBE_COUNT: usize = 2817;

/// Hard cap on the number of grids a planned set may contain.
pub const MAX_PLANNED_GRIDS: usize = 16384;

/// Sample size below which grid estimation refuses to run.
pub const MIN_GRID_SAMPLE: usize = 1000;

static PROBES: OnceLock<Arc<Vec<f64>>> = OnceLock::new();

/// The fixed probability grid: dense near both tails, coarser in the middle.
/// Lower half: 1e-5..=1e-4 by 1e-5, 2e-4..=0.1 by 1e-4, 0.101..=0.5 by 1e-3
/// (1409 probes); upper half mirrors it (1 - p), for 2817 in total.
pub fn probe_grid() -> Arc<Vec<f64>> {
    PROBES
        .get_or_init(|| {
            let mut p = Vec::with_capacity(PROBE_COUNT);
            for i in 1..=10u32 {
                p.push(f64::from(i) * 1e-5);
            }
            for i in 2..=1000u32 {
                p.push(f64::from(i) * 1e-4);
            }
            for i in 101..=500u32 {
                p.push(f64::from(i) * 1e-3);
            }
            let lower = p.len();
            for i in (0..lower - 1).rev() {
                let q = 1.0 - p[i];
                p.push(q);
            }
            assert_eq!(p.len(), PROBE_COUNT);
            assert!(
                p.windows(2).all(|w| w[0] < w[1]),
                "probe grid must be strictly increasing"
            );
            Arc::new(p)
        })
        .clone()
}

/// Identifies one conditional CDF: binary baseline covariates packed into
/// `x_bits` (bit `i` set when `x_i` is nonzero), the visit, and the binary
/// treatment path through that visit packed into `a_bits` (bit `j` for
/// visit `j`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridKey {
    pub x_bits: u64,
    pub k: u32,
    pub a_bits: u64,
}

impl GridKey {
    /// Key for a member with baseline values `x` and treatment history
    /// `a_hist` covering visits `0..=k`. Nonzero values count as 1.
    pub fn from_values(x: &[f64], a_hist: &[f64]) -> GridKey {
        GridKey {
            x_bits: pack_bits(x),
            k: a_hist.len() as u32 - 1,
            a_bits: pack_bits(a_hist),
        }
    }
}

fn pack_bits(values: &[f64]) -> u64 {
    values
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | (u64::from(v != 0.0) << i))
}

/// Stored quantiles of one conditional risk-score distribution.
#[derive(Clone, Debug)]
pub struct QuantileGrid {
    /// Shared probability probes, strictly increasing in (0,1).
    pub probs: Arc<Vec<f64>>,
    /// Score quantiles at each probe; nondecreasing.
    pub values: Vec<f64>,
    /// Monte Carlo sample size behind the estimate.
    pub m_used: usize,
}

/// Build a grid from an already-sorted score sample.
pub fn grid_from_sorted_scores(sorted: &[f64], probs: Arc<Vec<f64>>) -> QuantileGrid {
    let values = probs.iter().map(|&p| quantile_sorted(sorted, p)).collect();
    QuantileGrid {
        probs,
        values,
        m_used: sorted.len(),
    }
}

/// Conditional CDF value for score `h`: linear interpolation between stored
/// (value, prob) pairs; beyond the stored range the nearest segment's line
/// is extended, floored at `probs[0] / 2` below and capped symmetrically at
/// `1 - (1 - probs[last]) / 2` above so the result stays inside (0,1).
pub fn grid_lookup(grid: &QuantileGrid, h: f64) -> f64 {
    let vals = &grid.values;
    let probs = &grid.probs;
    let n = vals.len();
    debug_assert!(n >= 1 && n == probs.len());
    let idx = vals.partition_point(|&v| v < h);
    if idx < n && vals[idx] == h {
        return probs[idx];
    }
    if idx == 0 {
        let floor = probs[0] / 2.0;
        let Some(j) = (1..n).find(|&j| vals[j] > vals[0]) else {
            return floor;
        };
        let slope = (probs[j] - probs[0]) / (vals[j] - vals[0]);
        return (probs[0] - slope * (vals[0] - h)).clamp(floor, probs[0]);
    }
    if idx == n {
        let cap = 1.0 - (1.0 - probs[n - 1]) / 2.0;
        let Some(j) = (0..n - 1).rev().find(|&j| vals[j] < vals[n - 1]) else {
            return cap;
        };
        let slope = (probs[n - 1] - probs[j]) / (vals[n - 1] - vals[j]);
        return (probs[n - 1] + slope * (h - vals[n - 1])).clamp(probs[n - 1], cap);
    }
    let (v0, v1) = (vals[idx - 1], vals[idx]);
    let (p0, p1) = (probs[idx - 1], probs[idx]);
    p0 + (p1 - p0) * (h - v0) / (v1 - v0)
}

/// All grids needed to run the direct engine on one scenario.
#[derive(Clone, Debug, Default)]
pub struct GridSet {
    pub grids: BTreeMap<GridKey, QuantileGrid>,
}

impl GridSet {
    pub fn new() -> Self {
        GridSet::default()
    }

    pub fn get(&self, key: &GridKey) -> Option<&QuantileGrid> {
        self.grids.get(key)
    }

    pub fn insert(&mut self, key: GridKey, grid: QuantileGrid) {
        self.grids.insert(key, grid);
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Enumerate every `(x, treatment-path, visit)` key the scenario can
/// produce, or explain why grids cannot cover it.
pub fn plan_grid_keys(sc: &CompiledScenario) -> Result<Vec<GridKey>> {
    if sc.spec.risk_score.discrete {
        return Err(Error::Plan(
            "the risk score is declared discrete, so its conditional CDF has atoms that \
             a quantile grid cannot represent; use the matched engine"
                .into(),
        ));
    }
    for (i, spec) in sc.x.iter().enumerate() {
        if spec.kind != VarKind::Bernoulli {
            return Err(Error::Plan(format!(
                "baseline covariate {:?} is continuous, so (x, treatment-path) has \
                 infinite support; use the matched engine",
                sc.x_names[i]
            )));
        }
    }
    if sc.treatment.kind != TreatmentKind::BinaryLogistic {
        return Err(Error::Plan(
            "treatment is not binary, so the treatment-path support is infinite; \
             use the matched engine"
                .into(),
        ));
    }
    let n_x = sc.n_x() as u32;
    let visits = sc.visits() as u32;
    // 2^n_x covariate patterns times sum_{k=0}^{K} 2^(k+1) treatment paths.
    let per_x = 2u128.pow(visits + 1) - 2;
    let total = 2u128.pow(n_x) * per_x;
    if total > MAX_PLANNED_GRIDS as u128 {
        return Err(Error::Plan(format!(
            "scenario needs {total} grids (cap {MAX_PLANNED_GRIDS}); use the matched engine"
        )));
    }
    let mut keys = Vec::with_capacity(total as usize);
    for x_bits in 0..(1u64 << n_x) {
        for k in 0..visits {
            for a_bits in 0..(1u64 << (k + 1)) {
                keys.push(GridKey { x_bits, k, a_bits });
            }
        }
    }
    Ok(keys)
}

/// Estimate the per-visit conditional CDFs of the risk score under one
/// fully-specified treatment path, for one baseline covariate value. Works
/// for arbitrary (not necessarily binary) `x` and regime values.
pub fn estimate_cdf_tables(
    sc: &CompiledScenario,
    x: &[f64],
    regime: &[f64],
    m: usize,
    root_seed: u64,
    hook: Option<&ScoreHook>,
) -> Result<Vec<QuantileGrid>> {
    check_sample_size(m)?;
    if x.len() != sc.n_x() {
        return Err(Error::Domain(format!(
            "x has {} components, scenario defines {}",
            x.len(),
            sc.n_x()
        )));
    }
    if regime.len() != sc.visits() {
        return Err(Error::Domain(format!(
            "treatment path must give one value per visit ({}), got {}",
            sc.visits(),
            regime.len()
        )));
    }
    // Fold the conditioning values into the seed so different keys explore
    // independent noise under one root seed.
    let tags: Vec<u64> = x
        .iter()
        .chain(regime.iter())
        .map(|v| v.to_bits())
        .collect();
    let root = mix_root(root_seed, &tags);
    let probs = probe_grid();

    let mut pool = MatchPool::new(sc.n_b(), sc.n_l());
    let mut scratch = Vec::new();
    let mut rng = derive_rng(root, 0, StreamRole::Grid, 0);
    pool.rebuild(m, sc, x, &mut rng, &mut scratch);

    let mut grids = Vec::with_capacity(sc.visits());
    let mut scores = Vec::new();
    let mut failed = Vec::new();
    let mut survivors = Vec::new();
    for k in 0..sc.visits() {
        let mut rng = derive_rng(root, 0, StreamRole::Grid, node_salt(k, 0));
        let a_lag = if k == 0 { 0.0 } else { regime[k - 1] };
        pool.advance_l(sc, x, a_lag, k, &mut rng, &mut scratch);
        scores.clear();
        pool.extend_scores(sc, x, a_lag, regime[k], k, hook, &mut scores)?;

        let mut sorted = scores.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        grids.push(grid_from_sorted_scores(&sorted, probs.clone()));

        if k + 1 == sc.visits() {
            break;
        }
        let ranks = tie_broken_ranks(&scores, &mut rng);
        let g = sc.eval_g(k, &regime[..=k], x)?;
        pool_failure_split(
            m,
            &ranks,
            0,
            m as f64,
            g,
            sc.rho_at(k),
            &mut rng,
            &mut failed,
            &mut survivors,
        )?;
        apply_replacement(&mut pool, &failed, &survivors, &mut rng, k, m)?;
    }
    Ok(grids)
}

/// Estimate every grid in [`plan_grid_keys`]'s enumeration. Deterministic in
/// `(scenario, m, root_seed)` regardless of worker threads.
pub fn estimate_grid_set(
    sc: &CompiledScenario,
    m: usize,
    root_seed: u64,
    hook: Option<&ScoreHook>,
) -> Result<GridSet> {
    check_sample_size(m)?;
    plan_grid_keys(sc)?;
    let n_x = sc.n_x() as u32;
    let probs = probe_grid();
    let per_x: Result<Vec<Vec<(GridKey, QuantileGrid)>>> = (0..(1u64 << n_x))
        .into_par_iter()
        .map(|x_bits| estimate_grids_for_x(sc, x_bits, m, root_seed, hook, &probs))
        .collect();
    let mut set = GridSet::new();
    for chunk in per_x? {
        for (key, grid) in chunk {
            set.insert(key, grid);
        }
    }
    Ok(set)
}

fn check_sample_size(m: usize) -> Result<()> {
    if m < MIN_GRID_SAMPLE {
        return Err(Error::Domain(format!(
            "CDF estimation needs at least {MIN_GRID_SAMPLE} samples per key, got {m}"
        )));
    }
    Ok(())
}

/// Noise-stream tag for the chain node handling visit `k` under the packed
/// treatment prefix `a_bits`; tag 0 is reserved for the baseline sample.
fn node_salt(k: usize, a_bits: u64) -> u64 {
    ((k as u64 + 1) << 48) | a_bits
}

fn apply_replacement(
    pool: &mut MatchPool,
    failed: &[usize],
    survivors: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
    k: usize,
    m: usize,
) -> Result<()> {
    if failed.is_empty() {
        return Ok(());
    }
    if survivors.is_empty() {
        return Err(Error::PoolExhausted(format!(
            "all {m} CDF-estimation samples failed at visit {}; the hazard is too \
             high for grid estimation at this sample size",
            k + 1
        )));
    }
    replace_failed_members(pool, failed, survivors, rng);
    Ok(())
}

/// Depth-first walk over binary treatment prefixes for one covariate
/// pattern. The pool entering visit `k` holds survivors of the prefix
/// through `k-1` with confounders already advanced to `k`; each branch then
/// scores, stores its grid, applies the failure update, and recurses.
fn estimate_grids_for_x(
    sc: &CompiledScenario,
    x_bits: u64,
    m: usize,
    root_seed: u64,
    hook: Option<&ScoreHook>,
    probs: &Arc<Vec<f64>>,
) -> Result<Vec<(GridKey, QuantileGrid)>> {
    let x: Vec<f64> = (0..sc.n_x())
        .map(|i| f64::from((x_bits >> i) & 1 == 1))
        .collect();
    let mut out = Vec::new();
    let mut pool = MatchPool::new(sc.n_b(), sc.n_l());
    let mut scratch = Vec::new();
    let mut rng = derive_rng(root_seed, x_bits, StreamRole::Grid, 0);
    pool.rebuild(m, sc, &x, &mut rng, &mut scratch);
    pool.advance_l(sc, &x, 0.0, 0, &mut rng, &mut scratch);
    descend(sc, &x, x_bits, m, root_seed, hook, probs, &pool, 0, 0, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    sc: &CompiledScenario,
    x: &[f64],
    x_bits: u64,
    m: usize,
    root_seed: u64,
    hook: Option<&ScoreHook>,
    probs: &Arc<Vec<f64>>,
    pool: &MatchPool,
    k: usize,
    prefix_bits: u64,
    out: &mut Vec<(GridKey, QuantileGrid)>,
) -> Result<()> {
    let a_lag = if k == 0 {
        0.0
    } else {
        f64::from((prefix_bits >> (k - 1)) & 1 == 1)
    };
    let mut scores = Vec::new();
    for a_k in [0.0f64, 1.0] {
        let a_bits = prefix_bits | (u64::from(a_k != 0.0) << k);
        scores.clear();
        pool.extend_scores(sc, x, a_lag, a_k, k, hook, &mut scores)?;

        let mut sorted = scores.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        out.push((
            GridKey {
                x_bits,
                k: k as u32,
                a_bits,
            },
            grid_from_sorted_scores(&sorted, probs.clone()),
        ));

        if k + 1 == sc.visits() {
            continue;
        }
        // Failure update and next visit's confounders diverge per branch.
        let mut rng = derive_rng(root_seed, x_bits, StreamRole::Grid, node_salt(k, a_bits));
        let mut branch = pool.clone();
        let ranks = tie_broken_ranks(&scores, &mut rng);
        let a_path: Vec<f64> = (0..=k)
            .map(|j| f64::from((a_bits >> j) & 1 == 1))
            .collect();
        let g = sc.eval_g(k, &a_path, x)?;
        let mut failed = Vec::new();
        let mut survivors = Vec::new();
        pool_failure_split(
            m,
            &ranks,
            0,
            m as f64,
            g,
            sc.rho_at(k),
            &mut rng,
            &mut failed,
            &mut survivors,
        )?;
        apply_replacement(&mut branch, &failed, &survivors, &mut rng, k, m)?;
        let mut scratch = Vec::new();
        branch.advance_l(sc, x, a_k, k + 1, &mut rng, &mut scratch);
        descend(
            sc, x, x_bits, m, root_seed, hook, probs, &branch, k + 1, a_bits, out,
        )?;
    }
    Ok(())
}
