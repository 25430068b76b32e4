//! CSV and manifest serialisation.
//!
//! All writers stream to any `io::Write`, format floats with the shortest
//! round-trip representation, and emit rows in a deterministic order, so a
//! fixed seed produces byte-identical files regardless of worker count.
//!
//! Person-period exports follow the same at-risk convention as the
//! estimation tables: one row per individual per visit attended while under
//! observation, with the failure indicator set on the row whose interval
//! contains the event. A *blinded* export drops the oracle baseline columns
//! that the treatment process never looks at, mimicking what an analyst of
//! the generated data could actually record.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continuous_time::{CompiledCtScenario, CtIndividualRecord};
use crate::estimate::{BootstrapCi, FitResult, StudyTable};
use crate::record::IndividualRecord;
use crate::scenario::CompiledScenario;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Person-period and summary exports

/// Column names of a person-period export.
pub fn person_period_headers(sc: &CompiledScenario, blind: bool) -> Vec<String> {
    let observed = sc.observed_b_indices();
    let mut h = vec!["id".to_string(), "k".to_string(), "y".to_string()];
    h.extend(sc.x_names.iter().cloned());
    for (i, name) in sc.b_names.iter().enumerate() {
        if !blind || observed[i] {
            h.push(name.clone());
        }
    }
    h.extend(sc.l_names.iter().cloned());
    h.push("a".into());
    h.push("weight".into());
    h.push("t_event".into());
    h.push("censored".into());
    h
}

/// Write the long-format person-period table for a simulated cohort.
///
/// The `weight` column is a placeholder (always 1) for downstream fitters
/// to overwrite; `t_event`/`censored` repeat the individual-level exit time
/// and censoring indicator on every row.
pub fn write_person_period_csv<W: Write>(
    out: W,
    sc: &CompiledScenario,
    cohort: &[IndividualRecord],
    blind: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(person_period_headers(sc, blind))?;
    let visits = sc.visits();
    let n_l = sc.n_l();
    let observed = sc.observed_b_indices();
    let mut row: Vec<String> = Vec::new();
    for rec in cohort {
        let censor_limit = rec.censor_draw.unwrap_or(f64::INFINITY);
        let (exit, event, _) = rec.observed_exit(visits);
        for k in 0..visits {
            if !rec.alive_at(k) || ((k + 1) as f64) > censor_limit {
                break;
            }
            let y = u8::from(rec.failure_visit == Some(k as u32 + 1));
            row.clear();
            row.push(rec.id.to_string());
            row.push(k.to_string());
            row.push(y.to_string());
            row.extend(rec.x.iter().map(|v| fmt_f64(*v)));
            for (i, v) in rec.b.iter().enumerate() {
                if !blind || observed[i] {
                    row.push(fmt_f64(*v));
                }
            }
            row.extend(rec.l_at(k, n_l).iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(rec.a[k]));
            row.push("1".into());
            row.push(fmt_f64(exit));
            row.push(u8::from(!event).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write the one-row-per-individual summary (exit time, event indicator,
/// censoring reason).
pub fn write_summary_csv<W: Write>(
    out: W,
    sc: &CompiledScenario,
    cohort: &[IndividualRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "event_time", "event", "censor_reason"])?;
    let visits = sc.visits();
    for rec in cohort {
        let (exit, event, reason) = rec.observed_exit(visits);
        w.write_record([
            rec.id.to_string(),
            fmt_f64(exit),
            u8::from(event).to_string(),
            reason.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Continuous-time exports

/// Write the event-history table for a continuous-time cohort: one row per
/// state change (including the time-zero initial values), merged over both
/// processes and sorted by time within an individual.
pub fn write_ct_events_csv<W: Write>(out: W, cohort: &[CtIndividualRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "t", "var", "value"])?;
    for rec in cohort {
        let mut events: Vec<(f64, &str, f64)> = Vec::new();
        for (t, v) in rec.a_path.times.iter().zip(&rec.a_path.values) {
            events.push((*t, "a", *v));
        }
        for (t, v) in rec.l_path.times.iter().zip(&rec.l_path.values) {
            events.push((*t, "l", *v));
        }
        events.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(q.1)));
        for (t, var, value) in events {
            w.write_record([
                rec.id.to_string(),
                fmt_f64(t),
                var.to_string(),
                fmt_f64(value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Continuous-time per-individual summary. Only administrative censoring at
/// the horizon exists in this engine.
pub fn write_ct_summary_csv<W: Write>(
    out: W,
    sc: &CompiledCtScenario,
    cohort: &[CtIndividualRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "event_time", "event", "censor_reason"])?;
    for rec in cohort {
        let (t, event, reason) = match rec.failure_time {
            Some(t) => (t, 1u8, "none"),
            None => (sc.tau(), 0u8, "administrative"),
        };
        w.write_record([
            rec.id.to_string(),
            fmt_f64(t),
            event.to_string(),
            reason.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading person-period data back

/// A person-period table read from CSV: named numeric columns.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub n_rows: usize,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Column lookup that reports the available schema on a miss.
    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name).ok_or_else(|| {
            Error::Estimation(format!(
                "column {name:?} not found; the file has columns [{}]",
                self.headers.join(", ")
            ))
        })
    }
}

/// Read a numeric CSV with a header row.
pub fn read_csv_table<R: Read>(input: R) -> Result<CsvTable> {
    let mut r = csv::Reader::from_reader(input);
    let headers: Vec<String> = r.headers()?.iter().map(|h| h.to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Estimation(format!(
                "row {} has {} fields, header has {}",
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Estimation(format!(
                    "row {}, column {:?}: {:?} is not a number",
                    line + 2,
                    headers[i],
                    field
                ))
            })?;
            columns[i].push(v);
        }
    }
    let n_rows = columns.first().map_or(0, Vec::len);
    Ok(CsvTable {
        headers,
        columns,
        n_rows,
    })
}

/// Read a person-period CSV and check the layout assumptions the fitters
/// rely on: `id`, `k`, `y`, `a` columns present; rows grouped by individual;
/// visits consecutive from 0 within each individual.
pub fn read_person_period_csv<R: Read>(input: R) -> Result<CsvTable> {
    let table = read_csv_table(input)?;
    for required in ["id", "k", "y", "a"] {
        table.require(required)?;
    }
    let ids = table.column("id").unwrap();
    let ks = table.column("k").unwrap();
    let mut seen_ids = std::collections::HashSet::new();
    let mut row = 0usize;
    while row < ids.len() {
        let id = ids[row];
        if !seen_ids.insert(id.to_bits()) {
            return Err(Error::Estimation(format!(
                "rows for id {id} are not contiguous (row {})",
                row + 2
            )));
        }
        let mut k_expected = 0.0;
        while row < ids.len() && ids[row] == id {
            if ks[row] != k_expected {
                return Err(Error::Estimation(format!(
                    "id {id}: expected visit {k_expected} at row {}, found {}",
                    row + 2,
                    ks[row]
                )));
            }
            k_expected += 1.0;
            row += 1;
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Result tables

/// Coefficient table for one fitted model: estimate, model-based and
/// cluster-robust standard errors, the robust Wald interval, and percentile
/// bootstrap bounds when a bootstrap was run.
pub fn write_fit_csv<W: Write>(
    out: W,
    fit: &FitResult,
    bootstrap: Option<&BootstrapCi>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "term",
        "estimate",
        "model_se",
        "sandwich_se",
        "wald_low",
        "wald_high",
    ];
    if bootstrap.is_some() {
        header.push("boot_low");
        header.push("boot_high");
    }
    w.write_record(&header)?;
    let model_se = fit.model_se();
    let sandwich_se = fit.sandwich_se();
    for (i, name) in fit.col_names.iter().enumerate() {
        let est = fit.coef[i];
        let half = crate::estimate::Z_975 * sandwich_se[i];
        let mut row = vec![
            name.clone(),
            fmt_f64(est),
            fmt_f64(model_se[i]),
            fmt_f64(sandwich_se[i]),
            fmt_f64(est - half),
            fmt_f64(est + half),
        ];
        if let Some(ci) = bootstrap {
            row.push(fmt_f64(ci.lower[i]));
            row.push(fmt_f64(ci.upper[i]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Study summary table: one row per model term with bias, empirical SD,
/// mean sandwich SE, coverage and power (plus Monte Carlo SEs on the
/// coverage proportions).
pub fn write_study_csv<W: Write>(out: W, table: &StudyTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "term",
        "truth",
        "mean_naive",
        "mean_iptw",
        "bias_iptw",
        "emp_sd",
        "mean_sandwich_se",
        "coverage_sandwich",
        "coverage_sandwich_mc_se",
        "power_sandwich",
        "coverage_bootstrap",
        "power_bootstrap",
        "replicates_used",
    ])?;
    let reps = table.replicates_used;
    for r in &table.rows {
        w.write_record([
            r.name.clone(),
            fmt_f64(r.truth),
            fmt_f64(r.mean_naive),
            fmt_f64(r.mean_iptw),
            fmt_f64(r.bias_iptw),
            fmt_f64(r.emp_sd),
            fmt_f64(r.mean_sandwich_se),
            fmt_f64(r.coverage_sandwich),
            fmt_f64(crate::estimate::proportion_mc_se(r.coverage_sandwich, reps)),
            fmt_f64(r.power_sandwich),
            r.coverage_bootstrap.map(fmt_f64).unwrap_or_default(),
            r.power_bootstrap.map(fmt_f64).unwrap_or_default(),
            reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a pool-size sensitivity table.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRow {
    pub m: usize,
    /// Fraction of individuals whose outcome is identical to the
    /// reference run.
    pub agreement: f64,
    pub mc_se: f64,
}

pub fn write_sensitivity_csv<W: Write>(
    out: W,
    reference_m: usize,
    rows: &[AgreementRow],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "reference_m", "agreement", "mc_se"])?;
    for r in rows {
        w.write_record([
            r.m.to_string(),
            reference_m.to_string(),
            fmt_f64(r.agreement),
            fmt_f64(r.mc_se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run manifest

/// Reproducibility manifest written next to every output set: everything
/// needed to regenerate the files bit-for-bit, plus their hashes. Two runs
/// whose manifests agree on all fields except `seconds` produce identical
/// outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the canonical scenario JSON.
    pub scenario_digest: String,
    pub root_seed: u64,
    pub n: usize,
    pub workers: usize,
    /// Wall-clock duration; informational only.
    pub seconds: f64,
    /// Output file name -> SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest round-trip decimal representation (integers stay bare).
fn fmt_f64(v: f64) -> String {
    let mut buf = ryu::Buffer::new();
    let s = buf.format(v);
    s.strip_suffix(".0").unwrap_or(s).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous_time::StepPath;
    use crate::parse_scenario;

    fn toy_scenario() -> CompiledScenario {
        // b1 enters the treatment model (observed); b2 does not (oracle).
        parse_scenario(
            r#"{
                "visits": 3,
                "baseline_x": [{"name": "x1", "kind": "bernoulli", "model": {}}],
                "baseline_b": [
                    {"name": "b1", "kind": "normal", "model": {}},
                    {"name": "b2", "kind": "normal", "model": {}}
                ],
                "confounders": [{
                    "name": "l1", "kind": "normal",
                    "init": {}, "transition": {}
                }],
                "treatment": {
                    "kind": "binary-logistic",
                    "model": {"intercept": -0.5, "terms": [{"coef": 0.4, "var": "b1"}]}
                },
                "msm": {
                    "link": "logit",
                    "baseline": -2.0,
                    "terms": [{"coef": -0.7, "product": ["a"]}]
                },
                "risk_score": {"terms": [{"coef": 1.0, "var": "l1"}]},
                "rho": -0.5,
                "pool": {"m": 20}
            }"#,
        )
        .unwrap()
        .compile()
        .unwrap()
    }

    fn toy_record() -> IndividualRecord {
        IndividualRecord {
            id: 7,
            x: vec![1.0],
            b: vec![0.25, -1.5],
            l: vec![0.5, 0.75],
            a: vec![0.0, 1.0],
            failure_visit: Some(2),
            failure_time: Some(2.0),
            censor_draw: None,
            risk_quantiles: vec![0.3, 0.6],
            restarts: 0,
        }
    }

    #[test]
    fn person_period_export_matches_the_expected_rows() {
        let sc = toy_scenario();
        let rec = toy_record();
        let mut buf = Vec::new();
        write_person_period_csv(&mut buf, &sc, std::slice::from_ref(&rec), false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let expected = "\
id,k,y,x1,b1,b2,l1,a,weight,t_event,censored\n\
7,0,0,1,0.25,-1.5,0.5,0,1,2,0\n\
7,1,1,1,0.25,-1.5,0.75,1,1,2,0\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn blinded_export_drops_only_the_unobserved_oracle_columns() {
        let sc = toy_scenario();
        assert_eq!(sc.observed_b_indices(), vec![true, false]);
        let rec = toy_record();
        let mut buf = Vec::new();
        write_person_period_csv(&mut buf, &sc, std::slice::from_ref(&rec), true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,k,y,x1,b1,l1,a,weight,t_event,censored\n"));
        assert!(!text.contains("b2"));
        assert!(text.contains("0.25"), "observed b1 kept");
        assert!(!text.contains("-1.5"), "unobserved b2 dropped");
    }

    #[test]
    fn censoring_truncates_rows_and_the_summary_agrees() {
        let sc = toy_scenario();
        let mut rec = toy_record();
        rec.failure_visit = None;
        rec.failure_time = None;
        rec.a = vec![0.0, 1.0, 1.0];
        rec.l = vec![0.5, 0.75, 0.25];
        rec.censor_draw = Some(1.4); // inside (1, 2]: only visit 0 is observed
        let mut buf = Vec::new();
        write_person_period_csv(&mut buf, &sc, std::slice::from_ref(&rec), false).unwrap();
        let rows = String::from_utf8(buf).unwrap();
        assert_eq!(rows.lines().count(), 2, "header plus exactly one row");
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &sc, std::slice::from_ref(&rec)).unwrap();
        let summary = String::from_utf8(buf).unwrap();
        assert!(summary.contains("7,1.4,0,random"), "{summary}");
    }

    #[test]
    fn person_period_files_round_trip_and_layout_is_checked() {
        let sc = toy_scenario();
        let cohort = crate::simulate_cohort(&sc, 30, 99, &crate::EngineOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_person_period_csv(&mut buf, &sc, &cohort, false).unwrap();
        let table = read_person_period_csv(buf.as_slice()).unwrap();
        assert_eq!(
            table.headers,
            person_period_headers(&sc, false),
            "headers survive the round trip"
        );
        let ids = table.require("id").unwrap();
        assert_eq!(ids[0], 0.0);
        assert!(table.n_rows > 30, "several visits per individual");
        assert!(table.require("nope").is_err());

        // Shuffled rows violate the contiguity contract.
        let text = String::from_utf8(
            {
                let mut b = Vec::new();
                write_person_period_csv(&mut b, &sc, &cohort, false).unwrap();
                b
            }
        )
        .unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 4);
        let shuffled = lines.join("\n");
        assert!(read_person_period_csv(shuffled.as_bytes()).is_err());
    }

    #[test]
    fn fit_tables_only_show_bootstrap_columns_when_asked() {
        let sc = toy_scenario();
        let cohort = crate::simulate_cohort(&sc, 120, 3, &crate::EngineOptions::default()).unwrap();
        let report = crate::fit_cohort_msm(&sc, &cohort, 0, 3).unwrap();
        let mut buf = Vec::new();
        write_fit_csv(&mut buf, &report.iptw, report.bootstrap.as_ref()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("term,estimate,model_se,sandwich_se,wald_low,wald_high\n"));
        assert!(!text.contains("boot_low"));
        assert_eq!(text.lines().count(), 1 + report.iptw.col_names.len());
    }

    #[test]
    fn ct_event_files_merge_paths_in_time_order() {
        let rec = CtIndividualRecord {
            id: 3,
            a_path: StepPath {
                times: vec![0.0, 2.0],
                values: vec![0.0, 1.0],
            },
            l_path: StepPath {
                times: vec![0.0, 0.5, 3.5],
                values: vec![2.0, 1.0, 0.0],
            },
            failure_time: Some(4.25),
            surviving_matches: 9,
            rounds: 5,
        };
        let mut buf = Vec::new();
        write_ct_events_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let expected = "\
id,t,var,value\n\
3,0,a,0\n\
3,0,l,2\n\
3,0.5,l,1\n\
3,2,a,1\n\
3,3.5,l,0\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn manifests_serialise_with_output_hashes() {
        let dir = std::env::temp_dir().join("msmsim-csvio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.csv");
        std::fs::write(&path, b"id,k\n1,0\n").unwrap();
        let digest = file_sha256(&path).unwrap();
        assert_eq!(digest.len(), 64);
        let manifest = RunManifest {
            tool_version: "0.1.0".into(),
            command: "simulate".into(),
            scenario_digest: "abc".into(),
            root_seed: 42,
            n: 10,
            workers: 1,
            seconds: 0.5,
            outputs: BTreeMap::from([("x.csv".to_string(), digest)]),
        };
        let json = manifest.to_json().unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.root_seed, 42);
        assert!(json.contains("scenario_digest"));
    }
}
