//! The three-stage continual-learning pipeline.
//!
//! Per task, at time t:
//! 1. Update the feature extractor on current-task data with an auxiliary
//!    classifier (cross-entropy) plus an l2 feature-distillation penalty
//!    against the frozen previous extractor.
//! 2. Train a conditional VAE on current-task features (ELBO: l2
//!    reconstruction + Gaussian KL); the decoder is warm-started from the
//!    previous step's and held near it on past-class conditions by an l2
//!    replay-alignment penalty. The encoder is fresh every step.
//! 3. Generate synthetic features for non-current classes, then train a
//!    joint classifier over the full class universe on real + synthetic
//!    features.
//!
//! Variants differ only in generator conditioning and in which temporal
//! directions they can synthesize: class one-hots reach observed classes
//! only, attribute conditions also reach future classes. The asymmetric
//! variant trains one generator per direction. Every stochastic component
//! draws from its own seed stream, so variants that do identical work
//! produce bit-identical trajectories under a shared seed.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttributeTable, DataError, Sample, Task, TaskSequence};
use crate::eval::{
    autac, harmonic_mean, mean_autac, per_class_accuracy, CurvePoint, MetricError, ScoreMatrix,
};
use crate::models::{
    build_condition, build_condition_batch, ConditionMode, CvaeModel, FeatureExtractor,
    JointClassifier, ModelBundle,
};
use crate::rng::Prng;
use crate::tensor::adam::{adam_step, AdamState};
use crate::tensor::{params_hash, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage} at t={t}: {source}")]
    Stage {
        stage: &'static str,
        t: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("{what}: task has no training data")]
    EmptyTask { what: &'static str },
    #[error("class {class} has not been observed; one-hot conditioning cannot generate future classes")]
    FutureClass { class: usize },
    #[error("conditioning contract violated: {0}")]
    ConditionMismatch(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl TrainError {
    fn in_stage(self, stage: &'static str, t: usize) -> TrainError {
        TrainError::Stage {
            stage,
            t,
            source: Box::new(self),
        }
    }
}

/// Hyperparameters of one run. Defaults follow the reference recipe:
/// lambda1 = 1, lambda2 = 0.1, 300 synthetic features per class, Adam at
/// 1e-4 for the extractor and 1e-3 for VAE and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Feature-distillation weight.
    pub lambda1: f64,
    /// Replay-alignment weight.
    pub lambda2: f64,
    pub synth_per_class: usize,
    pub lr_feature: f64,
    pub lr_vae: f64,
    pub lr_classifier: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub encoder_hidden: (usize, usize),
    pub decoder_hidden: usize,
    pub classifier_bias: bool,
    /// Retrain the joint classifier from scratch each step (default) or
    /// continue from the previous one.
    pub classifier_from_scratch: bool,
    /// Allow attribute-conditioned generators to synthesize future
    /// classes. Off, every variant reduces to backward-only replay.
    pub forward_generation: bool,
    pub autac_grid: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda1: 1.0,
            lambda2: 0.1,
            synth_per_class: 300,
            lr_feature: 1e-4,
            lr_vae: 1e-3,
            lr_classifier: 1e-3,
            epochs_stage1: 50,
            epochs_stage2: 100,
            epochs_stage3: 50,
            batch_size: 64,
            latent_dim: 32,
            feature_dim: 32,
            extractor_hidden: vec![64, 64],
            encoder_hidden: (256, 128),
            decoder_hidden: 256,
            classifier_bias: false,
            classifier_from_scratch: true,
            forward_generation: true,
            autac_grid: 201,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Contract(msg));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad(format!(
                "loss weights must be nonnegative (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            ));
        }
        for (name, v) in [
            ("lr_feature", self.lr_feature),
            ("lr_vae", self.lr_vae),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("synth_per_class", self.synth_per_class),
            ("epochs_stage1", self.epochs_stage1),
            ("epochs_stage2", self.epochs_stage2),
            ("epochs_stage3", self.epochs_stage3),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("autac_grid", self.autac_grid),
        ] {
            if v < 1 {
                return bad(format!("{name} must be at least 1, got {v}"));
            }
        }
        if self.encoder_hidden.0 < 1 || self.encoder_hidden.1 < 1 {
            return bad(format!(
                "encoder_hidden widths must be at least 1, got {:?}",
                self.encoder_hidden
            ));
        }
        Ok(())
    }
}

/// The five trainable pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One-hot class conditioning; backward generation only (the
    /// continual-learning baseline).
    ClassBimag,
    /// Attribute conditioning; generates both directions.
    AttrBimag,
    /// One-hot plus attributes.
    ClassAttrBimag,
    /// Two generators: class-conditioned backward, attribute-conditioned
    /// forward.
    AsymBimag,
    /// All tasks merged into a single step; no generator.
    JointTraining,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ClassBimag,
        Variant::AttrBimag,
        Variant::ClassAttrBimag,
        Variant::AsymBimag,
        Variant::JointTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ClassBimag => "class_bimag",
            Variant::AttrBimag => "attr_bimag",
            Variant::ClassAttrBimag => "class_attr_bimag",
            Variant::AsymBimag => "asym_bimag",
            Variant::JointTraining => "joint_training",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class_bimag" => Ok(Variant::ClassBimag),
            "attr_bimag" => Ok(Variant::AttrBimag),
            "class_attr_bimag" => Ok(Variant::ClassAttrBimag),
            "asym_bimag" => Ok(Variant::AsymBimag),
            "joint_training" => Ok(Variant::JointTraining),
            other => Err(format!(
                "unknown variant `{other}`; expected one of class_bimag, attr_bimag, class_attr_bimag, asym_bimag, joint_training"
            )),
        }
    }
}

/// Per-step metrics, serialized into run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub acc_per_task: Vec<f64>,
    pub harmonic_mean: f64,
    pub autac: f64,
    pub curve: Vec<CurvePoint>,
}

/// The serializable outcome of one (variant, seed) run. Field order is
/// the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub config_echo: BTreeMap<String, String>,
    pub steps: Vec<StepRecord>,
    pub mean_autac: f64,
}

/// A full run: the record plus in-memory artifacts for inspection.
pub struct BclRun {
    pub record: RunRecord,
    pub bundles: Vec<ModelBundle>,
    pub score_matrices: Vec<ScoreMatrix>,
    /// Stage-2 objective per epoch, one vector per time step (empty for
    /// joint training).
    pub stage2_losses: Vec<Vec<f64>>,
}

fn matrix_of(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>), TrainError> {
    let first = samples
        .first()
        .ok_or(TrainError::EmptyTask { what: "batch" })?;
    let d = first.x.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.x.len() != d {
            return Err(TrainError::Contract(format!(
                "ragged inputs: {} vs {d} dims",
                s.x.len()
            )));
        }
        data.extend_from_slice(&s.x);
        labels.push(s.y);
    }
    Ok((Tensor::from_vec(samples.len(), d, data)?, labels))
}

fn check_finite(loss: f64, context: &str) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite {
            context: context.to_string(),
        }
        .into())
    }
}

/// Stage-1 output: the updated extractor plus the training accuracy the
/// discarded auxiliary classifier reached.
pub struct ExtractorTraining {
    pub extractor: FeatureExtractor,
    pub aux_train_accuracy: f64,
}

/// Stage 1: update the feature extractor on one task.
///
/// Loss: cross-entropy of an auxiliary classifier over current-task
/// classes, plus `lambda1` times the l2 distance between current and
/// previous features, computed on current-task inputs only. At the first
/// step (`prev` absent) the distillation term is omitted and the
/// extractor is freshly initialized; later steps start from `prev`.
pub fn train_feature_extractor(
    prev: Option<&FeatureExtractor>,
    task: &Task,
    cfg: &TrainingConfig,
    rng: &mut Prng,
) -> Result<ExtractorTraining, TrainError> {
    if task.train.is_empty() {
        return Err(TrainError::EmptyTask {
            what: "feature-extractor training",
        });
    }
    let refs: Vec<&Sample> = task.train.iter().collect();
    let (all_x, ys) = matrix_of(&refs)?;
    let n = refs.len();

    let mut local_labels = Vec::with_capacity(n);
    for &y in &ys {
        let idx = task.classes.binary_search(&y).map_err(|_| {
            TrainError::Contract(format!("sample class {y} not in the task's class set"))
        })?;
        local_labels.push(idx);
    }

    let mut extractor = match prev {
        Some(p) => p.clone(),
        None => FeatureExtractor::new(all_x.cols(), &cfg.extractor_hidden, cfg.feature_dim, rng),
    };
    let mut aux = JointClassifier::new(extractor.output_dim(), task.classes.len(), false, rng);

    let mut adam_f = AdamState::new();
    let mut adam_aux = AdamState::new();
    let f_names = extractor.param_names();
    let aux_names = aux.param_names();

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs_stage1 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = all_x.select_rows(chunk);
            let yl: Vec<usize> = chunk.iter().map(|&i| local_labels[i]).collect();

            let mut g = Graph::new();
            let bf = extractor.bind(&mut g, true);
            let ba = aux.bind(&mut g, true);
            let xid = g.constant(x.clone());
            let z = bf.forward(&mut g, xid)?;
            let logits = ba.forward(&mut g, z)?;
            let mut loss = g.softmax_cross_entropy(logits, &yl)?;
            if cfg.lambda1 > 0.0 {
                if let Some(prev) = prev {
                    let anchor = g.constant(prev.apply(&x)?);
                    let dist = g.l2_distance(z, anchor)?;
                    let weighted = g.scale(dist, cfg.lambda1);
                    loss = g.add(loss, weighted)?;
                }
            }
            check_finite(g.value(loss).item(), "stage-1 loss")?;
            g.backward(loss)?;
            let f_grads = bf.grads(&g);
            let aux_grads = ba.grads(&g);
            adam_step(
                &mut adam_f,
                &mut extractor.params_mut(),
                &f_grads,
                &f_names,
                cfg.lr_feature,
            )?;
            adam_step(
                &mut adam_aux,
                &mut aux.params_mut(),
                &aux_grads,
                &aux_names,
                cfg.lr_classifier,
            )?;
        }
    }

    let z = extractor.apply(&all_x)?;
    let (_, preds) = aux.classify(&z)?;
    let correct = preds
        .iter()
        .zip(&local_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(ExtractorTraining {
        extractor,
        aux_train_accuracy: correct as f64 / n as f64,
    })
}

/// Stage-2 output: the trained VAE and the objective per epoch.
#[derive(Debug)]
pub struct CvaeTraining {
    pub model: CvaeModel,
    pub epoch_losses: Vec<f64>,
}

/// Stage 2: train the conditional VAE on current-task features.
///
/// The encoder is fresh; the decoder warm-starts from `prev` when given.
/// Loss: l2 reconstruction + Gaussian KL, plus `lambda2` times the l2
/// distance between current and previous decoder outputs on shared
/// (noise, past-class condition) pairs sampled uniformly per batch. The
/// extractor stays frozen throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_cvae(
    extractor: &FeatureExtractor,
    task: &Task,
    prev: Option<&CvaeModel>,
    mode: ConditionMode,
    table: &AttributeTable,
    past_classes: &[usize],
    cfg: &TrainingConfig,
    rng: &mut Prng,
) -> Result<CvaeTraining, TrainError> {
    if task.train.is_empty() {
        return Err(TrainError::EmptyTask {
            what: "generator training",
        });
    }
    let d = extractor.output_dim();
    let cond_dim = mode.dim(table);
    if let Some(p) = prev {
        if p.cond_dim() != cond_dim
            || p.feature_dim() != d
            || p.latent_dim() != cfg.latent_dim
            || p.enc_hidden() != cfg.encoder_hidden
            || p.dec_hidden() != cfg.decoder_hidden
        {
            return Err(TrainError::ConditionMismatch(format!(
                "previous generator (cond {}, feature {}, latent {}) does not fit {} conditioning (cond {}, feature {d}, latent {})",
                p.cond_dim(),
                p.feature_dim(),
                p.latent_dim(),
                mode.as_str(),
                cond_dim,
                cfg.latent_dim,
            )));
        }
    }

    let mut model = CvaeModel::new(
        d,
        cond_dim,
        cfg.latent_dim,
        cfg.encoder_hidden,
        cfg.decoder_hidden,
        rng,
    );
    if let Some(p) = prev {
        model.copy_decoder_from(p);
    }

    let refs: Vec<&Sample> = task.train.iter().collect();
    let (x, ys) = matrix_of(&refs)?;
    let z_all = extractor.apply(&x)?;
    let cond_all = build_condition_batch(mode, &ys, table)?;
    let n = refs.len();

    let mut adam = AdamState::new();
    let names = model.param_names();
    let replay = prev.filter(|_| cfg.lambda2 > 0.0 && !past_classes.is_empty());

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_stage2);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs_stage2 {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let z = z_all.select_rows(chunk);
            let cond = cond_all.select_rows(chunk);

            let mut g = Graph::new();
            let bm = model.bind(&mut g, true);
            let zid = g.constant(z);
            let cid = g.constant(cond);
            let (mu, lv) = bm.encode(&mut g, zid, cid)?;
            let r = g.reparameterize(mu, lv, rng)?;
            let zhat = bm.decode(&mut g, r, cid)?;
            let recon = g.l2_distance(zhat, zid)?;
            let kl = g.gaussian_kl(mu, lv)?;
            let mut loss = g.add(recon, kl)?;

            if let Some(prev) = replay {
                let b = chunk.len();
                let replay_ys: Vec<usize> = (0..b)
                    .map(|_| past_classes[rng.below(past_classes.len())])
                    .collect();
                let replay_cond = build_condition_batch(mode, &replay_ys, table)?;
                let noise = Tensor::randn(b, cfg.latent_dim, rng);
                let target = prev.apply_decode(&noise, &replay_cond)?;
                let nid = g.constant(noise);
                let rcid = g.constant(replay_cond);
                let tid = g.constant(target);
                let replayed = bm.decode(&mut g, nid, rcid)?;
                let align = g.l2_distance(replayed, tid)?;
                let weighted = g.scale(align, cfg.lambda2);
                loss = g.add(loss, weighted)?;
            }

            let loss_v = g.value(loss).item();
            check_finite(loss_v, "stage-2 loss")?;
            g.backward(loss)?;
            let grads = bm.grads(&g);
            adam_step(&mut adam, &mut model.params_mut(), &grads, &names, cfg.lr_vae)?;
            total += loss_v * chunk.len() as f64;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(CvaeTraining {
        model,
        epoch_losses,
    })
}

/// Stage 3a: synthesize labeled features for `targets` through one
/// decoder. Targets are deduplicated and processed in ascending class
/// order, `n_per_class` draws each. One-hot (class) conditioning can only
/// reach classes in `observed`; asking for anything else is the
/// continual-learning capability error.
pub fn synthesize_features(
    vae: &CvaeModel,
    mode: ConditionMode,
    targets: &[usize],
    observed: &[usize],
    table: &AttributeTable,
    n_per_class: usize,
    rng: &mut Prng,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if mode == ConditionMode::Class {
        for &y in &sorted {
            if !observed.contains(&y) {
                return Err(TrainError::FutureClass { class: y });
            }
        }
    }
    let d = vae.feature_dim();
    let mut data = Vec::with_capacity(sorted.len() * n_per_class * d);
    let mut labels = Vec::with_capacity(sorted.len() * n_per_class);
    for &y in &sorted {
        let cond_row = build_condition(mode, y, table)?;
        let cond = Tensor::tile_row(&cond_row, n_per_class);
        let noise = Tensor::randn(n_per_class, vae.latent_dim(), rng);
        let z = vae.apply_decode(&noise, &cond)?;
        data.extend_from_slice(z.data());
        labels.extend(std::iter::repeat_n(y, n_per_class));
    }
    Ok((
        Tensor::from_vec(sorted.len() * n_per_class, d, data)?,
        labels,
    ))
}

/// Stage 3b: train the joint classifier over the full class universe on
/// real current-task features plus synthetic features.
pub fn train_joint_classifier(
    real: (&Tensor, &[usize]),
    synthetic: Option<(&Tensor, &[usize])>,
    n_classes: usize,
    warm: Option<&JointClassifier>,
    cfg: &TrainingConfig,
    rng: &mut Prng,
) -> Result<JointClassifier, TrainError> {
    let (rz, ry) = real;
    if rz.rows() != ry.len() {
        return Err(TrainError::Contract(format!(
            "{} real feature rows vs {} labels",
            rz.rows(),
            ry.len()
        )));
    }
    let (features, labels) = match synthetic {
        Some((sz, sy)) => {
            if sz.rows() != sy.len() {
                return Err(TrainError::Contract(format!(
                    "{} synthetic feature rows vs {} labels",
                    sz.rows(),
                    sy.len()
                )));
            }
            if sz.rows() > 0 && sz.cols() != rz.cols() {
                return Err(TensorError::ShapeMismatch {
                    op: "joint classifier features",
                    lhs: rz.shape(),
                    rhs: sz.shape(),
                }
                .into());
            }
            let mut data = rz.data().to_vec();
            data.extend_from_slice(sz.data());
            let mut labels = ry.to_vec();
            labels.extend_from_slice(sy);
            (
                Tensor::from_vec(rz.rows() + sz.rows(), rz.cols(), data)?,
                labels,
            )
        }
        None => (rz.clone(), ry.to_vec()),
    };
    let n = labels.len();
    if n == 0 {
        return Err(TrainError::EmptyTask {
            what: "joint-classifier training",
        });
    }

    let mut classifier = match warm.filter(|_| !cfg.classifier_from_scratch) {
        Some(c) => c.clone(),
        None => JointClassifier::new(features.cols(), n_classes, cfg.classifier_bias, rng),
    };
    let mut adam = AdamState::new();
    let names = classifier.param_names();

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs_stage3 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let z = features.select_rows(chunk);
            let yl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bc = classifier.bind(&mut g, true);
            let zid = g.constant(z);
            let logits = bc.forward(&mut g, zid)?;
            let loss = g.softmax_cross_entropy(logits, &yl)?;
            check_finite(g.value(loss).item(), "stage-3 loss")?;
            g.backward(loss)?;
            let grads = bc.grads(&g);
            adam_step(
                &mut adam,
                &mut classifier.params_mut(),
                &grads,
                &names,
                cfg.lr_classifier,
            )?;
        }
    }
    Ok(classifier)
}

/// Evaluate one step task-agnostically on the union of every task's test
/// set. Two-task sequences always group task-1 vs task-2 classes for
/// AUTAC and the harmonic mean; longer sequences group the most recently
/// trained task against the rest; a single task degenerates to plain
/// per-class accuracy.
fn evaluate_step(
    seq: &TaskSequence,
    extractor: &FeatureExtractor,
    classifier: &JointClassifier,
    t: usize,
    recent_task: usize,
    cfg: &TrainingConfig,
) -> Result<(StepRecord, ScoreMatrix), TrainError> {
    let test = seq.all_test_samples();
    let (x, labels) = matrix_of(&test)?;
    let z = extractor.apply(&x)?;
    let scores = classifier.scores(&z)?;
    let matrix = ScoreMatrix::new(scores, labels, seq.class_task_map())?;

    let mut acc_per_task = Vec::with_capacity(seq.n_tasks());
    for task in seq.tasks() {
        acc_per_task.push(per_class_accuracy(&matrix, &task.classes)?.1);
    }

    let k = seq.n_tasks();
    let (h, area, curve) = if k == 1 {
        let all: Vec<usize> = (0..seq.n_classes()).collect();
        let overall = per_class_accuracy(&matrix, &all)?.1;
        (overall, overall, Vec::new())
    } else {
        let (group_a, group_b) = if k == 2 {
            (seq.tasks()[0].classes.clone(), seq.tasks()[1].classes.clone())
        } else {
            let recent = seq.tasks()[recent_task].classes.clone();
            let others: Vec<usize> = (0..seq.n_classes())
                .filter(|c| !recent.contains(c))
                .collect();
            (others, recent)
        };
        let acc_a = per_class_accuracy(&matrix, &group_a)?.1;
        let acc_b = per_class_accuracy(&matrix, &group_b)?.1;
        let res = autac(&matrix, &group_a, &group_b, cfg.autac_grid)?;
        (harmonic_mean(acc_a, acc_b)?, res.area, res.curve)
    };

    Ok((
        StepRecord {
            t,
            acc_per_task,
            harmonic_mean: h,
            autac: area,
            curve,
        },
        matrix,
    ))
}

fn synth_stream(seed: u64, direction: &str, t: usize) -> Prng {
    Prng::derive(seed, &format!("synth/{direction}"), t as u64)
}

/// Run the full pipeline for one variant over a task sequence.
///
/// Evaluation is task-agnostic at every step: scores span the entire
/// class universe regardless of what has been trained. Identical configs
/// and seeds reproduce the returned record bit-for-bit.
pub fn run_bcl(
    variant: Variant,
    seq: &TaskSequence,
    table: &AttributeTable,
    cfg: &TrainingConfig,
) -> Result<BclRun, TrainError> {
    cfg.validate()?;
    if seq.n_tasks() == 0 {
        return Err(TrainError::Contract("empty task sequence".into()));
    }
    if table.n_classes() != seq.n_classes() {
        return Err(TrainError::ConditionMismatch(format!(
            "attribute table describes {} classes, task sequence has {}",
            table.n_classes(),
            seq.n_classes()
        )));
    }
    let universe = seq.n_classes();
    let seed = cfg.seed;

    let merged;
    let effective: Vec<&Task> = if variant == Variant::JointTraining {
        merged = seq.merged();
        vec![&merged]
    } else {
        seq.tasks().iter().collect()
    };

    let mut prev_extractor: Option<FeatureExtractor> = None;
    let mut prev_backward: Option<CvaeModel> = None;
    let mut prev_forward: Option<CvaeModel> = None;
    let mut prev_classifier: Option<JointClassifier> = None;

    let mut steps = Vec::new();
    let mut bundles = Vec::new();
    let mut score_matrices = Vec::new();
    let mut stage2_losses = Vec::new();

    for (idx, task) in effective.iter().enumerate() {
        let t = idx + 1;

        // stage 1: feature extractor
        let mut rng1 = Prng::derive(seed, "stage1", t as u64);
        let stage1 = train_feature_extractor(prev_extractor.as_ref(), task, cfg, &mut rng1)
            .map_err(|e| e.in_stage("stage 1", t))?;
        let extractor = stage1.extractor;
        let extractor_hash = params_hash(extractor.params());

        // stage 2: conditional VAE(s); the extractor is frozen here
        let observed: Vec<usize> = if variant == Variant::JointTraining {
            Vec::new()
        } else {
            seq.cumulative_classes(idx)
        };
        let (vae, forward_vae, losses) = match variant {
            Variant::JointTraining => (None, None, Vec::new()),
            Variant::ClassBimag | Variant::AttrBimag | Variant::ClassAttrBimag => {
                let mode = match variant {
                    Variant::ClassBimag => ConditionMode::Class,
                    Variant::AttrBimag => ConditionMode::Attr,
                    _ => ConditionMode::ClassAttr,
                };
                let mut rng2 = Prng::derive(seed, "stage2/backward", t as u64);
                let trained = train_cvae(
                    &extractor,
                    task,
                    prev_backward.as_ref(),
                    mode,
                    table,
                    &observed,
                    cfg,
                    &mut rng2,
                )
                .map_err(|e| e.in_stage("stage 2", t))?;
                (Some(trained.model), None, trained.epoch_losses)
            }
            Variant::AsymBimag => {
                let mut rng2 = Prng::derive(seed, "stage2/backward", t as u64);
                let backward = train_cvae(
                    &extractor,
                    task,
                    prev_backward.as_ref(),
                    ConditionMode::Class,
                    table,
                    &observed,
                    cfg,
                    &mut rng2,
                )
                .map_err(|e| e.in_stage("stage 2", t))?;
                let forward = if cfg.forward_generation {
                    let mut rngf = Prng::derive(seed, "stage2/forward", t as u64);
                    Some(
                        train_cvae(
                            &extractor,
                            task,
                            prev_forward.as_ref(),
                            ConditionMode::Attr,
                            table,
                            &observed,
                            cfg,
                            &mut rngf,
                        )
                        .map_err(|e| e.in_stage("stage 2", t))?
                        .model,
                    )
                } else {
                    None
                };
                (Some(backward.model), forward, backward.epoch_losses)
            }
        };
        assert_eq!(
            extractor_hash,
            params_hash(extractor.params()),
            "stage 2 must not mutate the feature extractor"
        );
        let vae_hash = vae.as_ref().map(|v| params_hash(v.params()));
        let forward_hash = forward_vae.as_ref().map(|v| params_hash(v.params()));

        // stage 3: synthesize, then train the joint classifier
        let future: Vec<usize> = (0..universe)
            .filter(|c| !observed.contains(c) && !task.classes.contains(c))
            .collect();
        let mut synth_features: Vec<f64> = Vec::new();
        let mut synth_labels: Vec<usize> = Vec::new();
        let mut push_synth = |part: (Tensor, Vec<usize>)| {
            synth_features.extend_from_slice(part.0.data());
            synth_labels.extend_from_slice(&part.1);
        };
        match variant {
            Variant::JointTraining => {}
            Variant::ClassBimag => {
                if let (Some(vae), false) = (&vae, observed.is_empty()) {
                    let mut rng = synth_stream(seed, "backward", t);
                    push_synth(
                        synthesize_features(
                            vae,
                            ConditionMode::Class,
                            &observed,
                            &observed,
                            table,
                            cfg.synth_per_class,
                            &mut rng,
                        )
                        .map_err(|e| e.in_stage("stage 3", t))?,
                    );
                }
            }
            Variant::AttrBimag | Variant::ClassAttrBimag => {
                let mode = if variant == Variant::AttrBimag {
                    ConditionMode::Attr
                } else {
                    ConditionMode::ClassAttr
                };
                let vae = vae.as_ref().expect("generator trained");
                if !observed.is_empty() {
                    let mut rng = synth_stream(seed, "backward", t);
                    push_synth(
                        synthesize_features(
                            vae,
                            mode,
                            &observed,
                            &observed,
                            table,
                            cfg.synth_per_class,
                            &mut rng,
                        )
                        .map_err(|e| e.in_stage("stage 3", t))?,
                    );
                }
                if cfg.forward_generation && !future.is_empty() {
                    let mut rng = synth_stream(seed, "forward", t);
                    push_synth(
                        synthesize_features(
                            vae,
                            mode,
                            &future,
                            &observed,
                            table,
                            cfg.synth_per_class,
                            &mut rng,
                        )
                        .map_err(|e| e.in_stage("stage 3", t))?,
                    );
                }
            }
            Variant::AsymBimag => {
                if !observed.is_empty() {
                    let vae = vae.as_ref().expect("backward generator trained");
                    let mut rng = synth_stream(seed, "backward", t);
                    push_synth(
                        synthesize_features(
                            vae,
                            ConditionMode::Class,
                            &observed,
                            &observed,
                            table,
                            cfg.synth_per_class,
                            &mut rng,
                        )
                        .map_err(|e| e.in_stage("stage 3", t))?,
                    );
                }
                if cfg.forward_generation && !future.is_empty() {
                    if let Some(fwd) = &forward_vae {
                        let mut rng = synth_stream(seed, "forward", t);
                        push_synth(
                            synthesize_features(
                                fwd,
                                ConditionMode::Attr,
                                &future,
                                &observed,
                                table,
                                cfg.synth_per_class,
                                &mut rng,
                            )
                            .map_err(|e| e.in_stage("stage 3", t))?,
                        );
                    }
                }
            }
        }

        let refs: Vec<&Sample> = task.train.iter().collect();
        let (x, real_labels) = matrix_of(&refs).map_err(|e| e.in_stage("stage 3", t))?;
        let real_z = extractor.apply(&x).map_err(TrainError::from)?;
        let synth = if synth_labels.is_empty() {
            None
        } else {
            Some((
                Tensor::from_vec(
                    synth_labels.len(),
                    real_z.cols(),
                    std::mem::take(&mut synth_features),
                )
                .map_err(TrainError::from)?,
                synth_labels,
            ))
        };
        let mut rng3 = Prng::derive(seed, "stage3", t as u64);
        let classifier = train_joint_classifier(
            (&real_z, &real_labels),
            synth.as_ref().map(|(z, y)| (z, y.as_slice())),
            universe,
            prev_classifier.as_ref(),
            cfg,
            &mut rng3,
        )
        .map_err(|e| e.in_stage("stage 3", t))?;

        assert_eq!(
            extractor_hash,
            params_hash(extractor.params()),
            "stage 3 must not mutate the feature extractor"
        );
        assert_eq!(
            vae_hash,
            vae.as_ref().map(|v| params_hash(v.params())),
            "stage 3 must not mutate the generator"
        );
        assert_eq!(
            forward_hash,
            forward_vae.as_ref().map(|v| params_hash(v.params())),
            "stage 3 must not mutate the forward generator"
        );

        // task-agnostic evaluation over every task's test set
        let recent_task = if variant == Variant::JointTraining {
            seq.n_tasks() - 1
        } else {
            idx
        };
        let (step, matrix) = evaluate_step(seq, &extractor, &classifier, t, recent_task, cfg)
            .map_err(|e| e.in_stage("evaluation", t))?;

        bundles.push(ModelBundle {
            extractor: extractor.clone(),
            classifier: classifier.clone(),
            vae: vae.clone(),
            forward_vae: forward_vae.clone(),
        });
        steps.push(step);
        score_matrices.push(matrix);
        stage2_losses.push(losses);

        prev_extractor = Some(extractor);
        prev_backward = vae;
        prev_forward = forward_vae;
        prev_classifier = Some(classifier);
    }

    let autac_values: Vec<f64> = steps.iter().map(|s| s.autac).collect();
    let record = RunRecord {
        variant: variant.as_str().to_string(),
        seed,
        config_echo: BTreeMap::new(),
        steps,
        mean_autac: mean_autac(&autac_values)?,
    };
    Ok(BclRun {
        record,
        bundles,
        score_matrices,
        stage2_losses,
    })
}
