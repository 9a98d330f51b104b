//! The `gen-data` and `run` subcommands.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bimag_core::data::io::{load_dataset, save_dataset};
use bimag_core::data::{
    generate_benchmark, split_tasks, split_tasks_shuffled, AttributeTable, DataError, Sample,
    TaskSequence,
};
use bimag_core::models::checkpoint::save_bundle;
use bimag_core::train::{run_bcl, TrainError, Variant};

use crate::config::{DataSource, ExperimentConfig};
use crate::CliError;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Redirect a configured output path into `--out DIR`, keeping the file
/// name.
fn redirect(path: &Path, out: Option<&Path>) -> PathBuf {
    match (out, path.file_name()) {
        (Some(dir), Some(name)) => dir.join(name),
        _ => path.to_path_buf(),
    }
}

fn stamp_tasks(samples: &mut [Sample], class_splits: &[usize]) -> Result<(), CliError> {
    let n_classes = samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let sum: usize = class_splits.iter().sum();
    if sum != n_classes {
        return Err(config_err(format!(
            "data.class_splits sums to {sum}, dataset has {n_classes} classes"
        )));
    }
    let mut class_to_task = vec![0usize; n_classes];
    let mut cursor = 0usize;
    for (k, &count) in class_splits.iter().enumerate() {
        class_to_task[cursor..cursor + count].fill(k);
        cursor += count;
    }
    for s in samples {
        s.task = class_to_task[s.y];
    }
    Ok(())
}

/// `gen-data <config>`: write the features and attributes CSVs described
/// by a `data.source = generate` config.
pub fn cmd_gen_data(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let DataSource::Generate(spec) = &config.source else {
        return Err(config_err(
            "gen-data needs `data.source = generate`".to_string(),
        ));
    };
    let features_path = config.features_path.as_deref().ok_or_else(|| {
        config_err("config key `data.features`: required by gen-data (output path)")
    })?;
    let attributes_path = config.attributes_path.as_deref().ok_or_else(|| {
        config_err("config key `data.attributes_file`: required by gen-data (output path)")
    })?;
    let features_path = redirect(features_path, out);
    let attributes_path = redirect(attributes_path, out);

    let (mut samples, table) = generate_benchmark(spec).map_err(config_err)?;
    stamp_tasks(&mut samples, &config.class_splits)?;

    for path in [&features_path, &attributes_path] {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| {
                    io_err(format!("cannot create {}: {e}", dir.display()))
                })?;
            }
        }
    }
    save_dataset(&samples, &table, &features_path, &attributes_path).map_err(io_err)?;

    let train = samples
        .iter()
        .filter(|s| s.split == bimag_core::data::Split::Train)
        .count();
    println!(
        "generated {} classes x {} attributes, input dim {}: {} train + {} test samples -> {} / {}",
        spec.classes,
        spec.attributes,
        spec.input_dim,
        train,
        samples.len() - train,
        features_path.display(),
        attributes_path.display(),
    );
    Ok(())
}

fn resolve_dataset(
    config: &ExperimentConfig,
) -> Result<(TaskSequence, AttributeTable), CliError> {
    let (samples, table) = match &config.source {
        DataSource::Generate(spec) => generate_benchmark(spec).map_err(config_err)?,
        DataSource::Files {
            features,
            attributes,
        } => {
            // fail fast on dangling paths before any training starts
            for path in [features, attributes] {
                if !path.exists() {
                    return Err(config_err(format!(
                        "dataset file {} does not exist",
                        path.display()
                    )));
                }
            }
            load_dataset(features, attributes).map_err(|e| match e {
                DataError::Io { .. } | DataError::Parse { .. } | DataError::Schema { .. } => {
                    io_err(e)
                }
                other => config_err(other),
            })?
        }
    };
    let seq = if config.shuffle_tasks {
        split_tasks_shuffled(&samples, &config.class_splits, config.shuffle_seed)
    } else {
        split_tasks(&samples, &config.class_splits)
    }
    .map_err(config_err)?;
    Ok((seq, table))
}

/// `run <config>`: execute every configured (variant, seed) pair and
/// write one run-record JSON per pair. Independent runs proceed in
/// parallel under the worker cap. Partial results survive failures; a
/// `failures.json` manifest lists what broke.
pub fn cmd_run(
    config_path: &Path,
    seed_override: Option<u64>,
    workers: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let (seq, table) = resolve_dataset(&config)?;

    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let out_dir = out.map(Path::to_path_buf).unwrap_or(config.out_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| io_err(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut jobs: Vec<(Variant, u64)> = Vec::new();
    for &variant in &config.variants {
        for &seed in &seeds {
            jobs.push((variant, seed));
        }
    }

    let workers = workers.unwrap_or(config.workers);
    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if workers > 0 {
            builder = builder.num_threads(workers);
        }
        builder
            .build()
            .map_err(|e| CliError::Run(format!("cannot build worker pool: {e}")))?
    };

    let base_echo = config.echo();
    let results: Vec<(Variant, u64, Result<(), String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                let outcome = execute_run(
                    &config, &seq, &table, variant, seed, &out_dir, &base_echo,
                );
                (variant, seed, outcome.map_err(|e| e.to_string()))
            })
            .collect()
    });

    let failures: Vec<_> = results
        .iter()
        .filter_map(|(variant, seed, r)| {
            r.as_ref()
                .err()
                .map(|e| (variant.as_str().to_string(), *seed, e.clone()))
        })
        .collect();
    if failures.is_empty() {
        println!(
            "{} runs completed -> {}",
            results.len(),
            out_dir.display()
        );
        return Ok(());
    }

    let manifest: Vec<serde_json::Value> = failures
        .iter()
        .map(|(variant, seed, error)| {
            serde_json::json!({ "variant": variant, "seed": seed, "error": error })
        })
        .collect();
    let manifest_path = out_dir.join("failures.json");
    let body = serde_json::to_string_pretty(&serde_json::Value::Array(manifest))
        .expect("manifest serializes");
    std::fs::write(&manifest_path, body + "\n")
        .map_err(|e| io_err(format!("cannot write {}: {e}", manifest_path.display())))?;
    Err(CliError::Run(format!(
        "{} of {} runs failed; manifest at {}",
        failures.len(),
        results.len(),
        manifest_path.display()
    )))
}

enum RunFailure {
    Train(TrainError),
    Io(String),
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunFailure::Train(e) => write!(f, "{e}"),
            RunFailure::Io(e) => write!(f, "{e}"),
        }
    }
}

fn execute_run(
    config: &ExperimentConfig,
    seq: &TaskSequence,
    table: &AttributeTable,
    variant: Variant,
    seed: u64,
    out_dir: &Path,
    base_echo: &std::collections::BTreeMap<String, String>,
) -> Result<(), RunFailure> {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let mut run = run_bcl(variant, seq, table, &train_cfg).map_err(RunFailure::Train)?;

    let mut echo = base_echo.clone();
    echo.insert("run.variant".to_string(), variant.as_str().to_string());
    echo.insert("run.seed".to_string(), seed.to_string());
    run.record.config_echo = echo;

    let record_path = out_dir.join(format!("{}_{}.json", variant.as_str(), seed));
    let body = serde_json::to_string_pretty(&run.record)
        .map_err(|e| RunFailure::Io(format!("serialize record: {e}")))?;
    std::fs::write(&record_path, body + "\n")
        .map_err(|e| RunFailure::Io(format!("cannot write {}: {e}", record_path.display())))?;

    if config.save_checkpoints {
        for (idx, bundle) in run.bundles.iter().enumerate() {
            let path = out_dir.join(format!("{}_{}_t{}.ckpt", variant.as_str(), seed, idx + 1));
            save_bundle(bundle, &path)
                .map_err(|e| RunFailure::Io(format!("cannot write checkpoint: {e}")))?;
        }
    }
    Ok(())
}
