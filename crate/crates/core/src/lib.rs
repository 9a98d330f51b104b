//! Bookworm continual learning with bidirectional feature imagination.
//!
//! A desk-scale implementation of class-incremental learning backed by a
//! fixed semantic model. Each task is learned in three stages: a
//! distillation-protected feature extractor, a conditional VAE that
//! generates synthetic features of past (replay) and future (foresight)
//! classes, and a joint classifier trained on real plus synthetic
//! features. Evaluation is task-agnostic via the area under the
//! per-class task-accuracy curve (AUTAC).
//!
//! Module map:
//! - [`tensor`]: dense 2-D tensors, reverse-mode autodiff, Adam.
//! - [`data`]: synthetic benchmark generation, CSV datasets, task splits.
//! - [`models`]: feature extractor, joint classifier, conditional VAE.
//! - [`train`]: the three-stage pipeline and its variants.
//! - [`eval`]: per-class accuracy, harmonic mean, AUTAC.
//! - [`rng`]: seeded, stream-isolated random numbers.

pub mod data;
pub mod eval;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
