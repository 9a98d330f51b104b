//! End-to-end tests of the `bimag` binary: exit codes, file outputs,
//! determinism, and report arithmetic.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bimag() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bimag"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bimag()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// A config that generates a tiny 4-class world and trains in
/// milliseconds.
fn tiny_config(seeds: &str, variants: &str) -> String {
    format!(
        "# tiny world for integration tests\n\
         data.source = generate\n\
         data.classes = 4\n\
         data.attributes = 5\n\
         data.input_dim = 4\n\
         data.train_per_class = 6\n\
         data.test_per_class = 3\n\
         data.alpha = 0.7\n\
         data.sigma = 0.3\n\
         data.seed = 11\n\
         data.features = data/features.csv\n\
         data.attributes_file = data/attributes.csv\n\
         data.class_splits = 2,2\n\
         run.variants = {variants}\n\
         run.seeds = {seeds}\n\
         run.out = runs\n\
         train.synth_per_class = 5\n\
         train.epochs_stage1 = 2\n\
         train.epochs_stage2 = 2\n\
         train.epochs_stage3 = 2\n\
         train.batch_size = 16\n\
         train.latent_dim = 4\n\
         train.feature_dim = 6\n\
         train.extractor_hidden = 8\n\
         train.encoder_hidden = 8,8\n\
         train.decoder_hidden = 8\n\
         train.autac_grid = 21\n"
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn gen_data_writes_both_files_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.cfg", &tiny_config("1", "attr_bimag"));
    let out = run_in(dir.path(), &["gen-data", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.path().join("data/features.csv").exists());
    assert!(dir.path().join("data/attributes.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("4 classes"), "{stdout}");
}

#[test]
fn gen_data_rejects_impossible_attribute_space() {
    // 2 attributes give at most 3 distinct nonzero rows; 10 classes
    // cannot fit
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("1", "attr_bimag")
        .replace("data.classes = 4", "data.classes = 10")
        .replace("data.attributes = 5", "data.attributes = 2")
        .replace("data.class_splits = 2,2", "data.class_splits = 5,5");
    write_config(dir.path(), "exp.cfg", &cfg);
    let out = run_in(dir.path(), &["gen-data", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("distinct"), "{}", stderr_of(&out));
}

#[test]
fn unknown_config_key_is_a_config_error_with_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("1", "attr_bimag") + "train.lamda1 = 2.0\n";
    write_config(dir.path(), "exp.cfg", &cfg);
    let out = run_in(dir.path(), &["run", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("train.lamda1"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn generated_files_reload_through_the_run_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "gen.cfg", &tiny_config("1", "attr_bimag"));
    let out = run_in(dir.path(), &["gen-data", "gen.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let run_cfg = tiny_config("1,2", "class_bimag,attr_bimag").replace(
        "data.source = generate",
        "data.source = files",
    );
    write_config(dir.path(), "run.cfg", &run_cfg);
    let out = run_in(dir.path(), &["run", "run.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    for name in [
        "class_bimag_1.json",
        "class_bimag_2.json",
        "attr_bimag_1.json",
        "attr_bimag_2.json",
    ] {
        assert!(dir.path().join("runs").join(name).exists(), "missing {name}");
    }
}

#[test]
fn rerunning_the_same_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.cfg", &tiny_config("3", "attr_bimag"));
    let out = run_in(dir.path(), &["run", "exp.cfg", "--out", "a"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let out = run_in(dir.path(), &["run", "exp.cfg", "--out", "b"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let a = std::fs::read(dir.path().join("a/attr_bimag_3.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/attr_bimag_3.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_attributes_file_fails_fast_as_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("1", "attr_bimag").replace(
        "data.source = generate",
        "data.source = files",
    );
    write_config(dir.path(), "exp.cfg", &cfg);
    // features exist, attributes do not
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    std::fs::write(
        dir.path().join("data/features.csv"),
        "split,task,y,x_0\ntrain,0,0,1.0\n",
    )
    .unwrap();
    let out = run_in(dir.path(), &["run", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("attributes.csv"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn seed_override_runs_exactly_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.cfg", &tiny_config("1,2,3", "class_bimag"));
    let out = run_in(
        dir.path(),
        &["run", "exp.cfg", "--seed-override", "9", "--workers", "1"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let entries: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries, vec!["class_bimag_9.json"]);
}

#[test]
fn report_emits_summary_curves_and_exact_mean_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "exp.cfg",
        &tiny_config("1,2,3,4,5", "attr_bimag"),
    );
    let out = run_in(dir.path(), &["run", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let out = run_in(dir.path(), &["report", "runs"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let summary = std::fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    let rows: Vec<Vec<String>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();

    // one row per (seed, t) plus a mean row per seed: 5 * (2 + 1),
    // plus aggregate mean/std rows for t in {1, 2, mean}: 6
    assert_eq!(rows.len(), 5 * 3 + 6, "{summary}");

    // per-run mean row autac equals the arithmetic mean of its t rows
    for seed in 1..=5 {
        let seed_s = seed.to_string();
        let of_seed: Vec<&Vec<String>> =
            rows.iter().filter(|r| r[1] == seed_s).collect();
        let t_autacs: Vec<f64> = of_seed
            .iter()
            .filter(|r| r[2] != "mean")
            .map(|r| r[6].parse::<f64>().unwrap())
            .collect();
        let mean_row = of_seed.iter().find(|r| r[2] == "mean").unwrap();
        let mean_autac: f64 = mean_row[6].parse().unwrap();
        let expected = t_autacs.iter().sum::<f64>() / t_autacs.len() as f64;
        assert!(
            (mean_autac - expected).abs() < 1e-12,
            "seed {seed}: {mean_autac} vs {expected}"
        );
    }

    // aggregate std matches an independent recomputation from per-seed rows
    let t1_autacs: Vec<f64> = rows
        .iter()
        .filter(|r| r[2] == "1" && r[1].parse::<u64>().is_ok())
        .map(|r| r[6].parse::<f64>().unwrap())
        .collect();
    assert_eq!(t1_autacs.len(), 5);
    let m = t1_autacs.iter().sum::<f64>() / 5.0;
    let expected_std =
        (t1_autacs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt();
    let std_row = rows
        .iter()
        .find(|r| r[1] == "std" && r[2] == "1")
        .expect("aggregate std row");
    let reported: f64 = std_row[6].parse().unwrap();
    assert!(
        (reported - expected_std).abs() < 1e-12,
        "{reported} vs {expected_std}"
    );

    // curve CSVs exist and have the gamma,acc_a,acc_b header
    let curve =
        std::fs::read_to_string(dir.path().join("runs/attr_bimag_1_t1_curve.csv")).unwrap();
    assert!(curve.starts_with("gamma,acc_a,acc_b\n"));
    assert!(curve.lines().count() > 3);

    // report is idempotent
    let before = std::fs::read(dir.path().join("runs/summary.csv")).unwrap();
    let out = run_in(dir.path(), &["report", "runs"]);
    assert_eq!(out.status.code(), Some(0));
    let after = std::fs::read(dir.path().join("runs/summary.csv")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn gen_data_unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    // `data` exists as a regular file, so data/features.csv cannot be
    // created
    std::fs::write(dir.path().join("data"), "occupied").unwrap();
    write_config(dir.path(), "exp.cfg", &tiny_config("1", "attr_bimag"));
    let out = run_in(dir.path(), &["gen-data", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn diverging_run_exits_three_with_a_failure_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // an absurd learning rate overflows the forward pass into NaN
    let cfg = tiny_config("1", "attr_bimag") + "train.lr_feature = 1e200\n";
    write_config(dir.path(), "exp.cfg", &cfg);
    let out = run_in(dir.path(), &["run", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    let manifest =
        std::fs::read_to_string(dir.path().join("runs/failures.json")).unwrap();
    assert!(manifest.contains("attr_bimag"), "{manifest}");
    assert!(manifest.contains("non-finite"), "{manifest}");
}

#[test]
fn report_rejects_malformed_records_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    std::fs::create_dir_all(&runs).unwrap();
    std::fs::write(runs.join("broken_1.json"), "{ not json").unwrap();
    let out = run_in(dir.path(), &["report", "runs"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("broken_1.json"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn report_requires_at_least_one_record() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("runs")).unwrap();
    let out = run_in(dir.path(), &["report", "runs"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}
