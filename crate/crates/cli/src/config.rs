//! Experiment configuration: a flat key-value text file with dotted
//! section prefixes (`train.lambda1 = 1.0`). Lines starting with `#` and
//! blank lines are ignored. Every key is validated; unknown keys and
//! malformed values are reported with their key path and line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bimag_core::data::BenchmarkSpec;
use bimag_core::train::{TrainingConfig, Variant};

use crate::CliError;

/// Raw parsed file: key -> (value, line number).
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    path: PathBuf,
}

impl RawConfig {
    pub fn parse(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{lineno}: expected `key = value`, got `{trimmed}`",
                    path.display()
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Config(format!(
                    "{}:{lineno}: empty key",
                    path.display()
                )));
            }
            if let Some((_, first)) = entries.get(&key) {
                return Err(CliError::Config(format!(
                    "{}:{lineno}: duplicate key `{key}` (first set on line {first})",
                    path.display()
                )));
            }
            entries.insert(key, (value, lineno));
        }
        Ok(RawConfig {
            entries,
            path: path.to_path_buf(),
        })
    }

    fn context(&self, key: &str) -> String {
        match self.entries.get(key) {
            Some((_, line)) => format!("config key `{key}` ({}:{line})", self.path.display()),
            None => format!("config key `{key}` ({})", self.path.display()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn parse_as<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                CliError::Config(format!("{}: invalid {what} `{v}`", self.context(key)))
            }),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.parse_as::<f64>(key, "real")?.unwrap_or(default))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.parse_as::<usize>(key, "integer")?.unwrap_or(default))
    }

    fn u64_req(&self, key: &str) -> Result<u64, CliError> {
        self.parse_as::<u64>(key, "integer")?
            .ok_or_else(|| CliError::Config(format!("{}: required", self.context(key))))
    }

    fn usize_req(&self, key: &str) -> Result<usize, CliError> {
        self.parse_as::<usize>(key, "integer")?
            .ok_or_else(|| CliError::Config(format!("{}: required", self.context(key))))
    }

    fn f64_req(&self, key: &str) -> Result<f64, CliError> {
        self.parse_as::<f64>(key, "real")?
            .ok_or_else(|| CliError::Config(format!("{}: required", self.context(key))))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(CliError::Config(format!(
                "{}: expected `true` or `false`, got `{v}`",
                self.context(key)
            ))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(part.parse::<T>().map_err(|_| {
                        CliError::Config(format!(
                            "{}: invalid {what} `{part}`",
                            self.context(key)
                        ))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }

    fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }
}

/// Where samples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Generate(BenchmarkSpec),
    Files {
        features: PathBuf,
        attributes: PathBuf,
    },
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Output paths for `gen-data`; also the input paths when
    /// `data.source = files`.
    pub features_path: Option<PathBuf>,
    pub attributes_path: Option<PathBuf>,
    pub class_splits: Vec<usize>,
    pub shuffle_tasks: bool,
    pub shuffle_seed: u64,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub save_checkpoints: bool,
    pub train: TrainingConfig,
}

const KNOWN_KEYS: &[&str] = &[
    "data.source",
    "data.classes",
    "data.attributes",
    "data.input_dim",
    "data.train_per_class",
    "data.test_per_class",
    "data.alpha",
    "data.sigma",
    "data.seed",
    "data.features",
    "data.attributes_file",
    "data.class_splits",
    "data.shuffle_tasks",
    "data.shuffle_seed",
    "run.variants",
    "run.seeds",
    "run.out",
    "run.workers",
    "run.save_checkpoints",
    "train.lambda1",
    "train.lambda2",
    "train.synth_per_class",
    "train.lr_feature",
    "train.lr_vae",
    "train.lr_classifier",
    "train.epochs_stage1",
    "train.epochs_stage2",
    "train.epochs_stage3",
    "train.batch_size",
    "train.latent_dim",
    "train.feature_dim",
    "train.extractor_hidden",
    "train.encoder_hidden",
    "train.decoder_hidden",
    "train.classifier_bias",
    "train.classifier_from_scratch",
    "train.forward_generation",
    "train.autac_grid",
];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = RawConfig::parse(path)?;
        for (key, (_, line)) in &raw.entries {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "{}:{line}: unknown key `{key}`",
                    raw.path.display()
                )));
            }
        }

        let source = match raw.raw("data.source") {
            Some("generate") => {
                let spec = BenchmarkSpec {
                    classes: raw.usize_req("data.classes")?,
                    attributes: raw.usize_req("data.attributes")?,
                    input_dim: raw.usize_req("data.input_dim")?,
                    train_per_class: raw.usize_req("data.train_per_class")?,
                    test_per_class: raw.usize_req("data.test_per_class")?,
                    alpha: raw.f64_req("data.alpha")?,
                    sigma: raw.f64_req("data.sigma")?,
                    seed: raw.u64_req("data.seed")?,
                };
                DataSource::Generate(spec)
            }
            Some("files") => {
                let features = raw.path_opt("data.features").ok_or_else(|| {
                    CliError::Config(format!(
                        "{}: required when data.source = files",
                        raw.context("data.features")
                    ))
                })?;
                let attributes = raw.path_opt("data.attributes_file").ok_or_else(|| {
                    CliError::Config(format!(
                        "{}: required when data.source = files",
                        raw.context("data.attributes_file")
                    ))
                })?;
                DataSource::Files {
                    features,
                    attributes,
                }
            }
            Some(other) => {
                return Err(CliError::Config(format!(
                    "{}: expected `generate` or `files`, got `{other}`",
                    raw.context("data.source")
                )))
            }
            None => {
                return Err(CliError::Config(format!(
                    "{}: required",
                    raw.context("data.source")
                )))
            }
        };

        let class_splits = raw
            .list::<usize>("data.class_splits", "integer")?
            .ok_or_else(|| {
                CliError::Config(format!("{}: required", raw.context("data.class_splits")))
            })?;
        if class_splits.is_empty() {
            return Err(CliError::Config(format!(
                "{}: needs at least one task",
                raw.context("data.class_splits")
            )));
        }

        let variant_names = raw
            .list::<String>("run.variants", "variant")?
            .unwrap_or_default();
        if variant_names.is_empty() {
            return Err(CliError::Config(format!(
                "{}: need at least one variant",
                raw.context("run.variants")
            )));
        }
        let mut variants = Vec::with_capacity(variant_names.len());
        for name in &variant_names {
            variants.push(Variant::from_str(name).map_err(|e| {
                CliError::Config(format!("{}: {e}", raw.context("run.variants")))
            })?);
        }

        let seeds = raw.list::<u64>("run.seeds", "integer")?.unwrap_or_default();
        if seeds.is_empty() {
            return Err(CliError::Config(format!(
                "{}: need at least one seed",
                raw.context("run.seeds")
            )));
        }

        let defaults = TrainingConfig::default();
        let encoder_hidden = match raw.list::<usize>("train.encoder_hidden", "integer")? {
            None => defaults.encoder_hidden,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(v) => {
                return Err(CliError::Config(format!(
                    "{}: expected two widths, got {v:?}",
                    raw.context("train.encoder_hidden")
                )))
            }
        };
        let train = TrainingConfig {
            lambda1: raw.f64_or("train.lambda1", defaults.lambda1)?,
            lambda2: raw.f64_or("train.lambda2", defaults.lambda2)?,
            synth_per_class: raw.usize_or("train.synth_per_class", defaults.synth_per_class)?,
            lr_feature: raw.f64_or("train.lr_feature", defaults.lr_feature)?,
            lr_vae: raw.f64_or("train.lr_vae", defaults.lr_vae)?,
            lr_classifier: raw.f64_or("train.lr_classifier", defaults.lr_classifier)?,
            epochs_stage1: raw.usize_or("train.epochs_stage1", defaults.epochs_stage1)?,
            epochs_stage2: raw.usize_or("train.epochs_stage2", defaults.epochs_stage2)?,
            epochs_stage3: raw.usize_or("train.epochs_stage3", defaults.epochs_stage3)?,
            batch_size: raw.usize_or("train.batch_size", defaults.batch_size)?,
            latent_dim: raw.usize_or("train.latent_dim", defaults.latent_dim)?,
            feature_dim: raw.usize_or("train.feature_dim", defaults.feature_dim)?,
            extractor_hidden: raw
                .list::<usize>("train.extractor_hidden", "integer")?
                .unwrap_or_else(|| defaults.extractor_hidden.clone()),
            encoder_hidden,
            decoder_hidden: raw.usize_or("train.decoder_hidden", defaults.decoder_hidden)?,
            classifier_bias: raw.bool_or("train.classifier_bias", defaults.classifier_bias)?,
            classifier_from_scratch: raw.bool_or(
                "train.classifier_from_scratch",
                defaults.classifier_from_scratch,
            )?,
            forward_generation: raw.bool_or(
                "train.forward_generation",
                defaults.forward_generation,
            )?,
            autac_grid: raw.usize_or("train.autac_grid", defaults.autac_grid)?,
            seed: 0, // per-run
        };
        train
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", raw.path.display())))?;

        Ok(ExperimentConfig {
            source,
            features_path: raw.path_opt("data.features"),
            attributes_path: raw.path_opt("data.attributes_file"),
            class_splits,
            shuffle_tasks: raw.bool_or("data.shuffle_tasks", false)?,
            shuffle_seed: raw.parse_as::<u64>("data.shuffle_seed", "integer")?.unwrap_or(0),
            variants,
            seeds: raw.list::<u64>("run.seeds", "integer")?.unwrap_or_default(),
            out_dir: raw.path_opt("run.out").unwrap_or_else(|| PathBuf::from("runs")),
            workers: raw.usize_or("run.workers", 0)?,
            save_checkpoints: raw.bool_or("run.save_checkpoints", false)?,
            train,
        })
    }

    /// The resolved configuration as flat key-value pairs; embedded into
    /// run records so every artifact carries its provenance.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        match &self.source {
            DataSource::Generate(spec) => {
                put("data.source", "generate".into());
                put("data.classes", spec.classes.to_string());
                put("data.attributes", spec.attributes.to_string());
                put("data.input_dim", spec.input_dim.to_string());
                put("data.train_per_class", spec.train_per_class.to_string());
                put("data.test_per_class", spec.test_per_class.to_string());
                put("data.alpha", spec.alpha.to_string());
                put("data.sigma", spec.sigma.to_string());
                put("data.seed", spec.seed.to_string());
            }
            DataSource::Files {
                features,
                attributes,
            } => {
                put("data.source", "files".into());
                put("data.features", features.display().to_string());
                put("data.attributes_file", attributes.display().to_string());
            }
        }
        let splits: Vec<String> = self.class_splits.iter().map(|v| v.to_string()).collect();
        put("data.class_splits", splits.join(","));
        put("data.shuffle_tasks", self.shuffle_tasks.to_string());
        if self.shuffle_tasks {
            put("data.shuffle_seed", self.shuffle_seed.to_string());
        }

        let t = &self.train;
        put("train.lambda1", t.lambda1.to_string());
        put("train.lambda2", t.lambda2.to_string());
        put("train.synth_per_class", t.synth_per_class.to_string());
        put("train.lr_feature", t.lr_feature.to_string());
        put("train.lr_vae", t.lr_vae.to_string());
        put("train.lr_classifier", t.lr_classifier.to_string());
        put("train.epochs_stage1", t.epochs_stage1.to_string());
        put("train.epochs_stage2", t.epochs_stage2.to_string());
        put("train.epochs_stage3", t.epochs_stage3.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.latent_dim", t.latent_dim.to_string());
        put("train.feature_dim", t.feature_dim.to_string());
        let hidden: Vec<String> = t.extractor_hidden.iter().map(|v| v.to_string()).collect();
        put("train.extractor_hidden", hidden.join(","));
        let mut enc = String::new();
        let _ = write!(enc, "{},{}", t.encoder_hidden.0, t.encoder_hidden.1);
        put("train.encoder_hidden", enc);
        put("train.decoder_hidden", t.decoder_hidden.to_string());
        put("train.classifier_bias", t.classifier_bias.to_string());
        put(
            "train.classifier_from_scratch",
            t.classifier_from_scratch.to_string(),
        );
        put(
            "train.forward_generation",
            t.forward_generation.to_string(),
        );
        put("train.autac_grid", t.autac_grid.to_string());
        map
    }
}
