//! The `report` subcommand: aggregate run-record JSONs into a summary
//! CSV (accuracies in percent, AUTAC as fractions) plus one curve CSV
//! per run step. Pure function of the record files; re-running
//! overwrites the same outputs byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use bimag_core::train::RunRecord;

use crate::CliError;

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

struct Row {
    variant: String,
    seed: String,
    t: String,
    acc_a: Option<f64>,
    acc_b: Option<f64>,
    h: Option<f64>,
    autac: f64,
    mean_autac: f64,
}

fn fmt_opt_pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.4}", v * 100.0)).unwrap_or_default()
}

// accuracy columns are cosmetic percentages; AUTAC columns print at
// round-trip precision so downstream arithmetic on the CSV is exact
fn write_row(out: &mut String, row: &Row) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        row.variant,
        row.seed,
        row.t,
        fmt_opt_pct(row.acc_a),
        fmt_opt_pct(row.acc_b),
        fmt_opt_pct(row.h),
        row.autac,
        row.mean_autac
    );
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for a single observation.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn opt_mean(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() && !present.is_empty() {
        Some(mean(&present))
    } else {
        None
    }
}

fn opt_std(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() && !present.is_empty() {
        Some(std_dev(&present))
    } else {
        None
    }
}

pub fn cmd_report(runs_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let entries = std::fs::read_dir(runs_dir)
        .map_err(|e| io_err(format!("cannot read {}: {e}", runs_dir.display())))?;
    let mut record_paths: Vec<std::path::PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(format!("cannot list {}: {e}", runs_dir.display())))?;
        let path = entry.path();
        let is_json = path.extension().is_some_and(|e| e == "json");
        let is_manifest = path.file_name().is_some_and(|n| n == "failures.json");
        if is_json && !is_manifest {
            record_paths.push(path);
        }
    }
    record_paths.sort();
    if record_paths.is_empty() {
        return Err(io_err(format!(
            "no run records found in {}",
            runs_dir.display()
        )));
    }

    let mut records: Vec<RunRecord> = Vec::with_capacity(record_paths.len());
    for path in &record_paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_err(format!("cannot read {}: {e}", path.display())))?;
        let record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| io_err(format!("malformed run record {}: {e}", path.display())))?;
        records.push(record);
    }
    records.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.seed.cmp(&b.seed)));

    let out_dir = out.unwrap_or(runs_dir);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| io_err(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut summary = String::from("variant,seed,t,acc_a,acc_b,h,autac,mean_autac\n");
    let mut per_run_rows: Vec<Row> = Vec::new();
    for record in &records {
        for step in &record.steps {
            per_run_rows.push(Row {
                variant: record.variant.clone(),
                seed: record.seed.to_string(),
                t: step.t.to_string(),
                acc_a: step.acc_per_task.first().copied(),
                acc_b: step.acc_per_task.get(1).copied(),
                h: Some(step.harmonic_mean),
                autac: step.autac,
                mean_autac: record.mean_autac,
            });
        }
        let accs_a: Vec<Option<f64>> = record
            .steps
            .iter()
            .map(|s| s.acc_per_task.first().copied())
            .collect();
        let accs_b: Vec<Option<f64>> = record
            .steps
            .iter()
            .map(|s| s.acc_per_task.get(1).copied())
            .collect();
        let hs: Vec<f64> = record.steps.iter().map(|s| s.harmonic_mean).collect();
        let autacs: Vec<f64> = record.steps.iter().map(|s| s.autac).collect();
        per_run_rows.push(Row {
            variant: record.variant.clone(),
            seed: record.seed.to_string(),
            t: "mean".to_string(),
            acc_a: opt_mean(&accs_a),
            acc_b: opt_mean(&accs_b),
            h: Some(mean(&hs)),
            autac: mean(&autacs),
            mean_autac: record.mean_autac,
        });
    }
    for row in &per_run_rows {
        write_row(&mut summary, row);
    }

    // per-variant aggregates over seeds, for each t plus the mean row
    let mut variants: Vec<String> = records.iter().map(|r| r.variant.clone()).collect();
    variants.dedup();
    for variant in &variants {
        let mut ts: Vec<String> = per_run_rows
            .iter()
            .filter(|r| &r.variant == variant)
            .map(|r| r.t.clone())
            .collect();
        ts.sort();
        ts.dedup();
        // numeric steps first, "mean" last
        ts.sort_by_key(|t| t.parse::<usize>().map_or(usize::MAX, |v| v));
        for t in &ts {
            let rows: Vec<&Row> = per_run_rows
                .iter()
                .filter(|r| &r.variant == variant && &r.t == t)
                .collect();
            let acc_a: Vec<Option<f64>> = rows.iter().map(|r| r.acc_a).collect();
            let acc_b: Vec<Option<f64>> = rows.iter().map(|r| r.acc_b).collect();
            let hs: Vec<Option<f64>> = rows.iter().map(|r| r.h).collect();
            let autacs: Vec<f64> = rows.iter().map(|r| r.autac).collect();
            let means: Vec<f64> = rows.iter().map(|r| r.mean_autac).collect();
            write_row(
                &mut summary,
                &Row {
                    variant: variant.clone(),
                    seed: "mean".to_string(),
                    t: t.clone(),
                    acc_a: opt_mean(&acc_a),
                    acc_b: opt_mean(&acc_b),
                    h: opt_mean(&hs),
                    autac: mean(&autacs),
                    mean_autac: mean(&means),
                },
            );
            write_row(
                &mut summary,
                &Row {
                    variant: variant.clone(),
                    seed: "std".to_string(),
                    t: t.clone(),
                    acc_a: opt_std(&acc_a),
                    acc_b: opt_std(&acc_b),
                    h: opt_std(&hs),
                    autac: std_dev(&autacs),
                    mean_autac: std_dev(&means),
                },
            );
        }
    }

    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, &summary)
        .map_err(|e| io_err(format!("cannot write {}: {e}", summary_path.display())))?;

    // per-run AUTAC curves
    for record in &records {
        for step in &record.steps {
            let mut body = String::from("gamma,acc_a,acc_b\n");
            for point in &step.curve {
                let _ = writeln!(body, "{},{},{}", point.gamma, point.acc_a, point.acc_b);
            }
            let path = out_dir.join(format!(
                "{}_{}_t{}_curve.csv",
                record.variant, record.seed, step.t
            ));
            std::fs::write(&path, body)
                .map_err(|e| io_err(format!("cannot write {}: {e}", path.display())))?;
        }
    }

    println!(
        "{} records -> {} and per-step curve CSVs",
        records.len(),
        summary_path.display()
    );
    Ok(())
}
