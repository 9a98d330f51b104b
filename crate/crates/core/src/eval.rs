//! Task-agnostic evaluation metrics.
//!
//! Accuracy is always per-class (mean recall, unweighted by class size).
//! AUTAC sweeps a calibration offset added to one group's scores and
//! integrates the resulting (group-A accuracy, group-B accuracy) curve by
//! the trapezoidal rule; it generalizes the seen/unseen AUSUC metric to
//! any two class groups. All accuracies live in [0, 1]; report layers
//! convert to percent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("class {class} has no test samples")]
    EmptyClass { class: usize },
    #[error("group {which} contains no class with test samples")]
    EmptyGroup { which: &'static str },
    #[error("groups overlap on class {class}")]
    GroupOverlap { class: usize },
    #[error("label {label} not covered by either group")]
    UncoveredLabel { label: usize },
    #[error("accuracy must be nonnegative, got {value}")]
    NegativeAccuracy { value: f64 },
    #[error("{what} requires at least one value")]
    Empty { what: &'static str },
    #[error("score matrix: {0}")]
    BadScores(String),
}

/// Test-set scores over the full class universe, with ground truth and
/// the class-to-task assignment.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    scores: Tensor,
    labels: Vec<usize>,
    class_task: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(
        scores: Tensor,
        labels: Vec<usize>,
        class_task: Vec<usize>,
    ) -> Result<Self, MetricError> {
        if scores.rows() != labels.len() {
            return Err(MetricError::BadScores(format!(
                "{} score rows vs {} labels",
                scores.rows(),
                labels.len()
            )));
        }
        if scores.cols() != class_task.len() {
            return Err(MetricError::BadScores(format!(
                "{} score columns vs {} class-task entries",
                scores.cols(),
                class_task.len()
            )));
        }
        if !scores.all_finite() {
            return Err(MetricError::BadScores("non-finite score".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= scores.cols()) {
            return Err(MetricError::BadScores(format!(
                "label {bad} outside the {}-class universe",
                scores.cols()
            )));
        }
        Ok(ScoreMatrix {
            scores,
            labels,
            class_task,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_task.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn classes_of_task(&self, task: usize) -> Vec<usize> {
        (0..self.n_classes())
            .filter(|&c| self.class_task[c] == task)
            .collect()
    }

    pub fn n_tasks(&self) -> usize {
        self.class_task.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Argmax predictions with ties broken toward the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.predictions_with_offset(&[], 0.0)
    }

    /// Argmax after adding `offset` to the scores of `boosted` classes.
    fn predictions_with_offset(&self, boosted: &[bool], offset: f64) -> Vec<usize> {
        let mut preds = Vec::with_capacity(self.n_samples());
        for r in 0..self.n_samples() {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (c, &v) in self.scores.row(r).iter().enumerate() {
                let s = if boosted.get(c).copied().unwrap_or(false) {
                    v + offset
                } else {
                    v
                };
                if s > best_score {
                    best_score = s;
                    best = c;
                }
            }
            preds.push(best);
        }
        preds
    }

    fn score_range(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.scores.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            0.0
        } else {
            hi - lo
        }
    }
}

/// Mean recall of `predictions` over the classes in `subset`, skipping
/// classes without samples. Internal building block for the public
/// metrics.
fn mean_recall_of(
    predictions: &[usize],
    labels: &[usize],
    subset: &[usize],
) -> (Vec<(usize, f64)>, Option<f64>) {
    let mut recalls = Vec::with_capacity(subset.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &c in subset {
        let total = labels.iter().filter(|&&y| y == c).count();
        if total == 0 {
            continue;
        }
        let correct = labels
            .iter()
            .zip(predictions)
            .filter(|&(&y, &p)| y == c && p == c)
            .count();
        let recall = correct as f64 / total as f64;
        recalls.push((c, recall));
        sum += recall;
        counted += 1;
    }
    if counted == 0 {
        (recalls, None)
    } else {
        (recalls, Some(sum / counted as f64))
    }
}

/// Per-class recalls over `subset` and their unweighted mean, using the
/// uncalibrated argmax predictions. Every class in `subset` must have at
/// least one test sample.
pub fn per_class_accuracy(
    matrix: &ScoreMatrix,
    subset: &[usize],
) -> Result<(Vec<f64>, f64), MetricError> {
    let preds = matrix.predictions();
    let mut recalls = Vec::with_capacity(subset.len());
    let mut sum = 0.0;
    for &c in subset {
        let total = matrix.labels.iter().filter(|&&y| y == c).count();
        if total == 0 {
            return Err(MetricError::EmptyClass { class: c });
        }
        let correct = matrix
            .labels
            .iter()
            .zip(&preds)
            .filter(|&(&y, &p)| y == c && p == c)
            .count();
        let recall = correct as f64 / total as f64;
        recalls.push(recall);
        sum += recall;
    }
    if subset.is_empty() {
        return Err(MetricError::Empty {
            what: "per_class_accuracy",
        });
    }
    Ok((recalls, sum / subset.len() as f64))
}

/// 2ab/(a+b); zero when both accuracies are zero.
pub fn harmonic_mean(acc_a: f64, acc_b: f64) -> Result<f64, MetricError> {
    if acc_a < 0.0 {
        return Err(MetricError::NegativeAccuracy { value: acc_a });
    }
    if acc_b < 0.0 {
        return Err(MetricError::NegativeAccuracy { value: acc_b });
    }
    if acc_a == 0.0 && acc_b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_a * acc_b / (acc_a + acc_b))
}

/// One sweep point: group accuracies after adding `gamma` to every
/// group-B score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub acc_a: f64,
    pub acc_b: f64,
}

#[derive(Debug, Clone)]
pub struct AutacResult {
    /// Area under the (acc_a, acc_b) curve, in [0, 1].
    pub area: f64,
    /// Sweep points in ascending gamma order; the first and last entries
    /// realize the two calibration limits.
    pub curve: Vec<CurvePoint>,
}

/// Trapezoidal area under a sweep curve. Points are traversed in
/// descending gamma order: along the sweep, acc_a weakly rises and acc_b
/// weakly falls as gamma falls, so this is the x-ascending order that
/// also resolves ties at vertical curve segments. Exposed so mirrored or
/// externally produced curves can be integrated the same way; the gamma
/// field must carry the sweep offset each point was evaluated at.
pub fn curve_area(points: &[CurvePoint]) -> f64 {
    let mut sorted: Vec<&CurvePoint> = points.iter().collect();
    sorted.sort_by(|p, q| q.gamma.total_cmp(&p.gamma));
    let mut area = 0.0;
    for w in sorted.windows(2) {
        area += (w[1].acc_a - w[0].acc_a) * (w[0].acc_b + w[1].acc_b) / 2.0;
    }
    area
}

fn group_masks(
    matrix: &ScoreMatrix,
    group_a: &[usize],
    group_b: &[usize],
) -> Result<Vec<bool>, MetricError> {
    let k = matrix.n_classes();
    let mut in_a = vec![false; k];
    let mut in_b = vec![false; k];
    for &c in group_a {
        in_a[c] = true;
    }
    for &c in group_b {
        if in_a[c] {
            return Err(MetricError::GroupOverlap { class: c });
        }
        in_b[c] = true;
    }
    if group_a.is_empty() {
        return Err(MetricError::EmptyGroup { which: "A" });
    }
    if group_b.is_empty() {
        return Err(MetricError::EmptyGroup { which: "B" });
    }
    for &y in &matrix.labels {
        if !in_a[y] && !in_b[y] {
            return Err(MetricError::UncoveredLabel { label: y });
        }
    }
    Ok(in_b)
}

/// AUTAC over an explicit offset list. The two calibration limits are
/// appended automatically: any offset beyond the total score range
/// forces predictions entirely into one group, so the limits are
/// realized exactly by finite offsets just outside that range.
pub fn autac_at_offsets(
    matrix: &ScoreMatrix,
    group_a: &[usize],
    group_b: &[usize],
    offsets: &[f64],
) -> Result<AutacResult, MetricError> {
    let in_b = group_masks(matrix, group_a, group_b)?;
    let range = matrix.score_range();
    let beyond = range + 1.0;

    let mut gammas: Vec<f64> = Vec::with_capacity(offsets.len() + 2);
    gammas.push(-beyond);
    gammas.extend_from_slice(offsets);
    gammas.push(beyond);
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();

    let mut curve = Vec::with_capacity(gammas.len());
    for &gamma in &gammas {
        let preds = matrix.predictions_with_offset(&in_b, gamma);
        let (_, acc_a) = mean_recall_of(&preds, &matrix.labels, group_a);
        let (_, acc_b) = mean_recall_of(&preds, &matrix.labels, group_b);
        let acc_a = acc_a.ok_or(MetricError::EmptyGroup { which: "A" })?;
        let acc_b = acc_b.ok_or(MetricError::EmptyGroup { which: "B" })?;
        curve.push(CurvePoint {
            gamma,
            acc_a,
            acc_b,
        });
    }
    let area = curve_area(&curve);
    Ok(AutacResult { area, curve })
}

/// AUTAC with a uniform grid of `grid` offsets spanning the score range,
/// plus the two limit points.
pub fn autac(
    matrix: &ScoreMatrix,
    group_a: &[usize],
    group_b: &[usize],
    grid: usize,
) -> Result<AutacResult, MetricError> {
    let range = matrix.score_range();
    let offsets: Vec<f64> = if grid <= 1 {
        vec![0.0]
    } else {
        (0..grid)
            .map(|i| -range + 2.0 * range * i as f64 / (grid - 1) as f64)
            .collect()
    };
    autac_at_offsets(matrix, group_a, group_b, &offsets)
}

/// Arithmetic mean of per-step AUTAC values.
pub fn mean_autac(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty { what: "mean_autac" });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn two_group_matrix(scores: Tensor, labels: Vec<usize>, split: usize) -> ScoreMatrix {
        let k = scores.cols();
        let class_task: Vec<usize> = (0..k).map(|c| usize::from(c >= split)).collect();
        ScoreMatrix::new(scores, labels, class_task).unwrap()
    }

    #[test]
    fn per_class_accuracy_all_correct() {
        let scores = Tensor::from_rows(&[&[5.0, 0.0], &[0.0, 5.0]]);
        let m = two_group_matrix(scores, vec![0, 1], 1);
        let (recalls, mean) = per_class_accuracy(&m, &[0, 1]).unwrap();
        assert_eq!(recalls, vec![1.0, 1.0]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn per_class_accuracy_constant_predictor_on_balanced_classes() {
        // always predicts class 0
        let scores = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let m = two_group_matrix(scores, vec![0, 0, 1, 1], 1);
        let (_, mean) = per_class_accuracy(&m, &[0, 1]).unwrap();
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn per_class_accuracy_is_unweighted_over_classes() {
        // class 0: 1 sample, recall 1; class 1: 2 samples, recall 0.5;
        // class 2: 3 samples, recall 0 -> mean 0.5 despite the imbalance
        let rows: Vec<Vec<f64>> = vec![
            vec![9.0, 0.0, 0.0],
            vec![0.0, 9.0, 0.0],
            vec![9.0, 0.0, 0.0],
            vec![9.0, 0.0, 0.0],
            vec![0.0, 9.0, 0.0],
            vec![9.0, 0.0, 0.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = two_group_matrix(Tensor::from_rows(&refs), vec![0, 1, 1, 2, 2, 2], 2);
        let (recalls, mean) = per_class_accuracy(&m, &[0, 1, 2]).unwrap();
        assert_eq!(recalls, vec![1.0, 0.5, 0.0]);
        assert!((mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn per_class_accuracy_names_empty_class() {
        let scores = Tensor::from_rows(&[&[1.0, 0.0]]);
        let m = two_group_matrix(scores, vec![0], 1);
        let err = per_class_accuracy(&m, &[0, 1]).unwrap_err();
        assert!(matches!(err, MetricError::EmptyClass { class: 1 }));
    }

    #[test]
    fn per_class_accuracy_invariant_under_row_permutation() {
        let mut rng = Prng::seed(17);
        let scores = Tensor::randn(12, 4, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let m = two_group_matrix(scores.clone(), labels.clone(), 2);
        let (_, mean) = per_class_accuracy(&m, &[0, 1, 2, 3]).unwrap();

        let mut idx: Vec<usize> = (0..12).collect();
        rng.shuffle(&mut idx);
        let permuted = scores.select_rows(&idx);
        let plabels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let pm = two_group_matrix(permuted, plabels, 2);
        let (_, pmean) = per_class_accuracy(&pm, &[0, 1, 2, 3]).unwrap();
        assert_eq!(mean, pmean);
    }

    #[test]
    fn harmonic_mean_paper_values() {
        assert!((harmonic_mean(77.74, 41.30).unwrap() - 53.94).abs() < 0.01);
        assert!((harmonic_mean(72.28, 62.02).unwrap() - 66.76).abs() < 0.01);
    }

    #[test]
    fn harmonic_mean_identity_and_zero() {
        assert_eq!(harmonic_mean(0.37, 0.37).unwrap(), 0.37);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_mean_rejects_negative() {
        assert!(harmonic_mean(-0.1, 0.5).is_err());
    }

    #[test]
    fn harmonic_mean_below_arithmetic_with_equality_iff_equal() {
        let mut rng = Prng::seed(23);
        for _ in 0..200 {
            let a = rng.uniform();
            let b = rng.uniform();
            let h = harmonic_mean(a, b).unwrap();
            let am = (a + b) / 2.0;
            assert!(h <= am + 1e-12);
            if (a - b).abs() > 1e-9 {
                assert!(h < am);
            }
        }
        let a = 0.42;
        assert!((harmonic_mean(a, a).unwrap() - a).abs() < 1e-15);
    }

    #[test]
    fn mean_autac_paper_values() {
        assert!((mean_autac(&[0.484, 0.670]).unwrap() - 0.577).abs() < 1e-9);
        assert!((mean_autac(&[0.555, 0.914]).unwrap() - 0.7345).abs() < 1e-9);
        assert_eq!(mean_autac(&[0.3]).unwrap(), 0.3);
        assert!(mean_autac(&[]).is_err());
    }

    /// 2 group-A classes, 2 group-B classes, true class scored 1 and all
    /// others 0: no grid offset within the score range flips a decision.
    #[test]
    fn autac_perfect_classifier_reaches_one() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4usize {
            for _ in 0..3 {
                let mut r = vec![0.0; 4];
                r[c] = 1.0;
                rows.push(r);
                labels.push(c);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = two_group_matrix(Tensor::from_rows(&refs), labels, 2);
        let res = autac(&m, &[0, 1], &[2, 3], 201).unwrap();
        assert!(res.area >= 0.99, "area {}", res.area);
        assert!(res
            .curve
            .iter()
            .any(|p| p.acc_a == 1.0 && p.acc_b == 1.0));
    }

    /// Class 0 (group A) always wins by a huge margin and the group-B
    /// columns rank every B sample wrong, so acc_b stays 0 for every
    /// offset and the area collapses to zero.
    #[test]
    fn autac_degenerate_predictor_is_zero() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &y in &[0usize, 1, 2, 3] {
            for _ in 0..2 {
                let mut r = vec![0.0, -1.0, 0.0, 0.0];
                r[0] = 1000.0;
                // among B columns {2, 3}, the wrong one always leads
                if y == 2 {
                    r[2] = -5.0;
                } else {
                    r[3] = -5.0;
                }
                rows.push(r);
                labels.push(y);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = two_group_matrix(Tensor::from_rows(&refs), labels, 2);
        let res = autac(&m, &[0, 1], &[2, 3], 201).unwrap();
        assert_eq!(res.area, 0.0, "area {}", res.area);
        assert!(res.curve.iter().all(|p| p.acc_b == 0.0 || p.acc_a == 0.0));
    }

    #[test]
    fn autac_rejects_empty_group_and_overlap() {
        let scores = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = two_group_matrix(scores, vec![0, 1], 1);
        assert!(matches!(
            autac(&m, &[], &[0, 1], 11),
            Err(MetricError::EmptyGroup { .. })
        ));
        assert!(matches!(
            autac(&m, &[0], &[0, 1], 11),
            Err(MetricError::GroupOverlap { class: 0 })
        ));
    }

    #[test]
    fn autac_invariant_to_global_score_shift() {
        let mut rng = Prng::seed(5);
        for _ in 0..20 {
            let scores = Tensor::randn(20, 4, &mut rng);
            let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
            let m = two_group_matrix(scores.clone(), labels.clone(), 2);
            let base = autac(&m, &[0, 1], &[2, 3], 101).unwrap().area;

            let shift = rng.normal() * 50.0;
            let mut shifted = scores.clone();
            for v in shifted.data_mut() {
                *v += shift;
            }
            let m2 = two_group_matrix(shifted, labels, 2);
            let s = autac(&m2, &[0, 1], &[2, 3], 101).unwrap().area;
            assert!((base - s).abs() < 1e-9, "{base} vs {s}");
        }
    }

    #[test]
    fn autac_group_swap_matches_mirrored_curve() {
        let mut rng = Prng::seed(8);
        for _ in 0..10 {
            let scores = Tensor::randn(30, 5, &mut rng);
            let labels: Vec<usize> = (0..30).map(|i| i % 5).collect();
            let class_task: Vec<usize> = vec![0, 0, 1, 1, 1];
            let m = ScoreMatrix::new(scores, labels, class_task).unwrap();
            let ab = autac(&m, &[0, 1], &[2, 3, 4], 2001).unwrap();
            let ba = autac(&m, &[2, 3, 4], &[0, 1], 2001).unwrap();
            let mirrored: Vec<CurvePoint> = ab
                .curve
                .iter()
                .map(|p| CurvePoint {
                    gamma: -p.gamma,
                    acc_a: p.acc_b,
                    acc_b: p.acc_a,
                })
                .collect();
            let mirrored_area = curve_area(&mirrored);
            assert!(
                (mirrored_area - ba.area).abs() < 1e-6,
                "{mirrored_area} vs {}",
                ba.area
            );
        }
    }

    #[test]
    fn autac_curve_endpoints_and_monotone_x() {
        let mut rng = Prng::seed(13);
        let scores = Tensor::randn(24, 4, &mut rng);
        let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
        let m = two_group_matrix(scores, labels, 2);
        let res = autac(&m, &[0, 1], &[2, 3], 51).unwrap();
        let first = res.curve.first().unwrap();
        let last = res.curve.last().unwrap();
        // gamma = -inf limit: group B never predicted
        assert_eq!(first.acc_b, 0.0);
        // gamma = +inf limit: group A never predicted
        assert_eq!(last.acc_a, 0.0);
        // x weakly decreases as gamma increases
        for w in res.curve.windows(2) {
            assert!(w[0].gamma < w[1].gamma);
            assert!(w[0].acc_a >= w[1].acc_a - 1e-15);
            assert!(w[0].acc_b <= w[1].acc_b + 1e-15);
        }
    }
}
