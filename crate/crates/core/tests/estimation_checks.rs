//! End-to-end checks of the verification refit: weighting must remove the
//! built-in confounding, interval methods must agree with each other, and
//! the replicated-study driver must produce a coherent table. These run at
//! moderate sizes; the release acceptance suite repeats the key recoveries
//! at full scale with tighter tolerances.

use msmsim::estimate::{fit_cohort_msm, run_msm_validation, run_sim_study};
use msmsim::engine::{simulate_cohort, EngineOptions};
use msmsim::scenario::builtin_scenario;

fn term_index(names: &[String], want: &str) -> usize {
    names
        .iter()
        .position(|n| n == want)
        .unwrap_or_else(|| panic!("no term named {want} in {names:?}"))
}

#[test]
fn weighting_removes_the_built_in_confounding() {
    let sc = builtin_scenario("logistic-high").unwrap().compile().unwrap();
    let report = run_msm_validation(&sc, 12_000, 0xf17_0001, 0).unwrap();
    let a = term_index(&report.term_names, "a");

    let iptw = report.iptw_term_estimates();
    let naive = report.naive_term_estimates();
    assert!(
        (iptw[a] + 1.0).abs() < 0.15,
        "weighted treatment coefficient {:.3} should be near -1",
        iptw[a]
    );
    assert!(
        naive[a] - iptw[a] > 0.3,
        "confounding should bias the unweighted estimate upward: naive {:.3}, weighted {:.3}",
        naive[a],
        iptw[a]
    );
    for (i, name) in report.term_names.iter().enumerate() {
        if name != "a" {
            assert!(
                (iptw[i] - report.truth[i]).abs() < 0.15,
                "weighted {name} = {:.3}, truth {:.3}",
                iptw[i],
                report.truth[i]
            );
        }
    }
}

/// Percentile-bootstrap interval width should track the normal-theory
/// sandwich width (3.92 standard errors) on a well-specified cohort large
/// enough for both to be in their asymptotic regime.
#[test]
fn bootstrap_width_tracks_the_sandwich_width() {
    let mut spec = builtin_scenario("logistic-high").unwrap();
    spec.pool.m = 400;
    let sc = spec.compile().unwrap();
    let cohort = simulate_cohort(&sc, 6000, 0xf17_0002, &EngineOptions::default()).unwrap();
    let report = fit_cohort_msm(&sc, &cohort, 200, 0xf17_0003).unwrap();

    let a = term_index(&report.term_names, "a");
    let col = report.term_offset + a;
    let boot = report.bootstrap.as_ref().expect("bootstrap was requested");
    assert_eq!(boot.used + boot.failed, 200);
    assert!(boot.failed < 10, "too many failed resamples: {}", boot.failed);

    let boot_width = boot.upper[col] - boot.lower[col];
    let sandwich_width = 2.0 * 1.959964 * report.iptw.sandwich_se()[col];
    let ratio = boot_width / sandwich_width;
    assert!(
        (0.75..=1.30).contains(&ratio),
        "bootstrap width {boot_width:.4} vs sandwich width {sandwich_width:.4} (ratio {ratio:.2})"
    );
    // The point estimate should sit inside its own interval.
    let est = report.iptw.coef[col];
    assert!(boot.lower[col] < est && est < boot.upper[col]);
}

#[test]
fn study_tables_are_coherent() {
    let mut spec = builtin_scenario("logistic-medium").unwrap();
    spec.pool.m = 300;
    let sc = spec.compile().unwrap();
    let table = run_sim_study(&sc, 400, 12, 0, 0xf17_0004).unwrap();

    assert_eq!(table.replicates_requested, 12);
    assert_eq!(table.replicates_used + table.failed_replicates, 12);
    assert!(table.replicates_used >= 10, "{} usable replicates", table.replicates_used);
    // Three real terms plus the deliberately redundant visit interactions
    // the refit adds to verify spurious structure is not found.
    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.bootstrap_b, 0);

    let truths: Vec<f64> = table.rows.iter().map(|r| r.truth).collect();
    assert_eq!(truths, vec![0.5, 0.5, -1.0, 0.0, 0.0, 0.0]);
    for row in &table.rows {
        assert!(row.emp_sd > 0.0);
        assert!(row.mean_sandwich_se > 0.0);
        assert!((0.0..=1.0).contains(&row.coverage_sandwich));
        assert!((0.0..=1.0).contains(&row.power_sandwich));
        assert!(row.coverage_bootstrap.is_none());
        assert!(row.power_bootstrap.is_none());
        assert!(
            (row.mean_iptw - row.truth).abs() < 0.6,
            "term {}: mean weighted estimate {:.3} vs truth {:.3} at n=400",
            row.name,
            row.mean_iptw,
            row.truth
        );
        assert_eq!(row.bias_iptw, row.mean_iptw - row.truth);
    }
}

/// The refit must reject scenarios whose marginal model it cannot express
/// rather than silently fitting the wrong link.
#[test]
fn additive_hazard_scenarios_are_rejected_by_the_refit() {
    let mut spec = builtin_scenario("logistic-medium").unwrap();
    spec.msm.link = msmsim::scenario::MsmLink::AdditiveHazard;
    spec.msm.baseline = msmsim::scenario::ScalarOrPerVisit::Scalar(0.05);
    spec.msm.terms.clear();
    let sc = spec.compile().unwrap();
    let err = run_msm_validation(&sc, 50, 0xf17_0005, 0);
    assert!(err.is_err());
}
