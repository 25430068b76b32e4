//! Temporary diagnostic: why does the denominator treatment model stop
//! without converging at n = 100 000?

use msmsim::engine::{simulate_cohort, EngineOptions};
use msmsim::estimate::{
    expand_person_period, fit_pooled_binary, weight_model_terms, BinaryLink, InterceptKind,
    PersonPeriodTable, RowOutcome,
};
use msmsim::scenario::builtin_scenario;

const VALIDATION_SEED: u64 = 0x6d73_6d2d_7661_6c31;

fn score_amax(table: &PersonPeriodTable, coef: &[f64]) -> f64 {
    let p = table.n_cols;
    let mut score = vec![0.0f64; p];
    for r in 0..table.n_rows() {
        let row = table.row(r);
        let eta: f64 = row.iter().zip(coef).map(|(x, b)| x * b).sum();
        let mu = 1.0 / (1.0 + (-eta.clamp(-35.0, 35.0)).exp());
        let psi = table.y[r] - mu;
        for j in 0..p {
            score[j] += psi * row[j];
        }
    }
    score.iter().fold(0.0f64, |m, s| m.max(s.abs()))
}

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100_000);
    let sc = builtin_scenario("logistic-medium").unwrap().compile().unwrap();
    eprintln!("simulating n={n} ...");
    let t0 = std::time::Instant::now();
    let cohort = simulate_cohort(&sc, n, VALIDATION_SEED ^ 1, &EngineOptions::default()).unwrap();
    eprintln!("simulated in {:.1}s", t0.elapsed().as_secs_f64());

    let (den, num) = weight_model_terms(&sc);
    for (label, terms) in [("denominator", &den), ("numerator", &num)] {
        let table = expand_person_period(
            &cohort,
            &sc,
            terms,
            InterceptKind::PerVisit,
            RowOutcome::Treatment,
        )
        .unwrap();
        eprintln!(
            "{label}: {} rows x {} cols",
            table.n_rows(),
            table.n_cols
        );
        match fit_pooled_binary(&table, BinaryLink::Logit, None) {
            Ok(fit) => {
                let amax = score_amax(&table, &fit.coef);
                let maxc = fit.coef.iter().fold(0.0f64, |m, c| m.max(c.abs()));
                eprintln!(
                    "{label}: converged={} iters={} score_amax={:.3e} max|coef|={:.3} loglik={:.6}",
                    fit.converged, fit.iters, amax, maxc, fit.log_lik
                );
            }
            Err(e) => eprintln!("{label}: ERROR {e}"),
        }
    }
}
