//! Benchmark worlds: synthetic feature datasets with a controllable
//! semantic model, plus loaders for precomputed-feature datasets and the
//! class-to-task split.
//!
//! The generator's `alpha` knob controls how much of a class's appearance
//! is expressible through its attributes: at `alpha = 1` class means are
//! fully determined by the attribute row, at `alpha = 0` they are pure
//! class-private directions the semantic model cannot explain.

pub mod io;

use thiserror::Error;

use crate::rng::Prng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("could not draw {classes} distinct nonzero attribute rows with {attributes} attributes after {tries} tries; increase the attribute count")]
    AttributeCollision {
        classes: usize,
        attributes: usize,
        tries: usize,
    },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("task split {got:?} sums to {sum}, dataset has {classes} classes")]
    BadSplit {
        got: Vec<usize>,
        sum: usize,
        classes: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("schema error in {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labeled input vector (synthetic or precomputed feature).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub task: usize,
    pub split: Split,
}

/// The class-to-attribute matrix A; row y is the description G(y).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    rows: Vec<Vec<f64>>,
}

impl AttributeTable {
    /// Rows must be the same width and pairwise distinct.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::InvalidSpec("attribute table has no rows".into()));
        }
        let q = rows[0].len();
        if q == 0 {
            return Err(DataError::InvalidSpec("attribute rows are empty".into()));
        }
        for (y, row) in rows.iter().enumerate() {
            if row.len() != q {
                return Err(DataError::InvalidSpec(format!(
                    "attribute row {y} has {} entries, expected {q}",
                    row.len()
                )));
            }
        }
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                if rows[a] == rows[b] {
                    return Err(DataError::InvalidSpec(format!(
                        "attribute rows {a} and {b} are identical; classes must be semantically distinguishable"
                    )));
                }
            }
        }
        Ok(AttributeTable { rows })
    }

    /// The identity semantic model: describe(y) = onehot(y).
    pub fn identity(classes: usize) -> Self {
        let rows = (0..classes)
            .map(|y| {
                let mut r = vec![0.0; classes];
                r[y] = 1.0;
                r
            })
            .collect();
        AttributeTable { rows }
    }

    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.rows[0].len()
    }

    /// G(y) = A 1_y: the attribute row of class y.
    pub fn describe(&self, y: usize) -> Result<&[f64], DataError> {
        self.rows.get(y).map(|r| r.as_slice()).ok_or({
            DataError::ClassOutOfRange {
                class: y,
                classes: self.rows.len(),
            }
        })
    }
}

/// Parameters of a generated benchmark world.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub attributes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Attribute expressiveness in [0, 1]; see the module docs.
    pub alpha: f64,
    /// Within-class noise, per coordinate.
    pub sigma: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.attributes < 1 {
            return Err(DataError::InvalidSpec("need at least 1 attribute".into()));
        }
        if self.input_dim < 1 {
            return Err(DataError::InvalidSpec("need input_dim >= 1".into()));
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(DataError::InvalidSpec(
                "need at least 1 train and 1 test sample per class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DataError::InvalidSpec(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

const ATTRIBUTE_DRAW_TRIES: usize = 1000;

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale to norm sqrt(dim) so coordinates sit at unit scale and `sigma`
/// is comparable across dimensions.
fn unit_scale(v: &mut [f64]) {
    let norm = l2_norm(v);
    let target = (v.len() as f64).sqrt();
    for x in v.iter_mut() {
        *x *= target / norm;
    }
}

/// Generate a benchmark world.
///
/// Attributes are Bernoulli(0.5) per (class, attribute), redrawn until
/// rows are pairwise distinct and nonzero. Class means blend an
/// attribute-determined direction (a fixed random map of the attribute
/// row) with a class-private random direction, weighted `alpha` versus
/// `1 - alpha`; both directions are scaled to norm sqrt(input_dim).
/// Samples add isotropic Gaussian noise with deviation `sigma`.
pub fn generate_benchmark(
    spec: &BenchmarkSpec,
) -> Result<(Vec<Sample>, AttributeTable), DataError> {
    spec.validate()?;
    let mut rng = Prng::seed(spec.seed);
    let (c, q, d) = (spec.classes, spec.attributes, spec.input_dim);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut tries = 0usize;
    while rows.len() < c {
        let row: Vec<f64> = (0..q)
            .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
            .collect();
        tries += 1;
        let nonzero = row.iter().any(|&v| v != 0.0);
        if nonzero && !rows.contains(&row) {
            rows.push(row);
        } else if tries >= ATTRIBUTE_DRAW_TRIES {
            return Err(DataError::AttributeCollision {
                classes: c,
                attributes: q,
                tries,
            });
        }
    }
    let table = AttributeTable { rows };

    // Fixed random map from attribute space to input space.
    let attr_map: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();

    let mut samples = Vec::with_capacity(c * (spec.train_per_class + spec.test_per_class));
    for y in 0..c {
        let attrs = table.describe(y).expect("class in range");
        let mut semantic = vec![0.0; d];
        for (aq, map_row) in attrs.iter().zip(&attr_map) {
            if *aq != 0.0 {
                for (s, m) in semantic.iter_mut().zip(map_row) {
                    *s += aq * m;
                }
            }
        }
        unit_scale(&mut semantic);

        let mut private: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        unit_scale(&mut private);

        let mean: Vec<f64> = semantic
            .iter()
            .zip(&private)
            .map(|(s, p)| spec.alpha * s + (1.0 - spec.alpha) * p)
            .collect();

        for (count, split) in [
            (spec.train_per_class, Split::Train),
            (spec.test_per_class, Split::Test),
        ] {
            for _ in 0..count {
                let x: Vec<f64> = mean.iter().map(|m| m + spec.sigma * rng.normal()).collect();
                samples.push(Sample {
                    x,
                    y,
                    task: 0,
                    split,
                });
            }
        }
    }
    Ok((samples, table))
}

/// One task: a class set with its train and test samples.
#[derive(Debug, Clone)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// The ordered task sequence; class sets partition the class universe.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    tasks: Vec<Task>,
    n_classes: usize,
}

impl TaskSequence {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Task index per class.
    pub fn class_task_map(&self) -> Vec<usize> {
        let mut map = vec![0usize; self.n_classes];
        for (k, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                map[c] = k;
            }
        }
        map
    }

    /// Classes of tasks 1..=t (1-based, inclusive).
    pub fn cumulative_classes(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .tasks
            .iter()
            .take(t)
            .flat_map(|task| task.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// All test samples, in task order.
    pub fn all_test_samples(&self) -> Vec<&Sample> {
        self.tasks.iter().flat_map(|t| t.test.iter()).collect()
    }

    /// Merge every task into a single one (the joint-training view).
    pub fn merged(&self) -> Task {
        let mut classes = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for task in &self.tasks {
            classes.extend_from_slice(&task.classes);
            train.extend(task.train.iter().cloned());
            test.extend(task.test.iter().cloned());
        }
        classes.sort_unstable();
        Task {
            classes,
            train,
            test,
        }
    }
}

fn assign_tasks(
    samples: &[Sample],
    class_splits: &[usize],
    class_order: &[usize],
) -> Result<TaskSequence, DataError> {
    let n_classes = samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let sum: usize = class_splits.iter().sum();
    if sum != n_classes || class_splits.contains(&0) {
        return Err(DataError::BadSplit {
            got: class_splits.to_vec(),
            sum,
            classes: n_classes,
        });
    }

    let mut class_to_task = vec![0usize; n_classes];
    let mut cursor = 0usize;
    let mut task_classes: Vec<Vec<usize>> = Vec::with_capacity(class_splits.len());
    for &count in class_splits {
        let mut classes: Vec<usize> = class_order[cursor..cursor + count].to_vec();
        classes.sort_unstable();
        for &c in &classes {
            class_to_task[c] = task_classes.len();
        }
        task_classes.push(classes);
        cursor += count;
    }

    let mut tasks: Vec<Task> = task_classes
        .into_iter()
        .map(|classes| Task {
            classes,
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for s in samples {
        let k = class_to_task[s.y];
        let mut s = s.clone();
        s.task = k;
        match s.split {
            Split::Train => tasks[k].train.push(s),
            Split::Test => tasks[k].test.push(s),
        }
    }
    Ok(TaskSequence { tasks, n_classes })
}

/// Assign classes to tasks in ascending class index: the first
/// `class_splits[0]` classes form task 1, and so on. Deterministic, so
/// runs are comparable across variants.
pub fn split_tasks(samples: &[Sample], class_splits: &[usize]) -> Result<TaskSequence, DataError> {
    let n_classes = samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let order: Vec<usize> = (0..n_classes).collect();
    assign_tasks(samples, class_splits, &order)
}

/// [`split_tasks`] with a seeded shuffle of the class-to-task assignment.
pub fn split_tasks_shuffled(
    samples: &[Sample],
    class_splits: &[usize],
    seed: u64,
) -> Result<TaskSequence, DataError> {
    let n_classes = samples.iter().map(|s| s.y + 1).max().unwrap_or(0);
    let mut order: Vec<usize> = (0..n_classes).collect();
    let mut rng = Prng::derive(seed, "task-shuffle", 0);
    rng.shuffle(&mut order);
    assign_tasks(samples, class_splits, &order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            classes: 10,
            attributes: 8,
            input_dim: 16,
            train_per_class: 50,
            test_per_class: 20,
            alpha: 0.5,
            sigma: 0.3,
            seed: 7,
        }
    }

    #[test]
    fn attribute_distinctness_error_when_q_too_small() {
        let spec = BenchmarkSpec {
            classes: 4,
            attributes: 1,
            ..toy_spec()
        };
        match generate_benchmark(&spec) {
            Err(DataError::AttributeCollision { .. }) => {}
            other => panic!("expected attribute collision, got {other:?}"),
        }
    }

    #[test]
    fn identical_rows_rejected_by_table_constructor() {
        let rows = vec![vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]];
        assert!(AttributeTable::from_rows(rows).is_err());
    }

    #[test]
    fn noiseless_limit_concentrates_on_the_semantic_mean() {
        let spec = BenchmarkSpec {
            alpha: 1.0,
            sigma: 1e-9,
            ..toy_spec()
        };
        let (samples, _) = generate_benchmark(&spec).unwrap();
        for y in 0..spec.classes {
            let of_class: Vec<&Sample> = samples.iter().filter(|s| s.y == y).collect();
            let first = &of_class[0].x;
            for s in &of_class {
                let d: f64 = s
                    .x
                    .iter()
                    .zip(first)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d < 1e-6, "class {y} spread {d}");
            }
        }
    }

    /// Nearest-class-mean oracle: with unit-scale means and sigma = 0.3,
    /// classes are comfortably separable.
    #[test]
    fn nearest_class_mean_separability() {
        let spec = toy_spec();
        let (samples, _) = generate_benchmark(&spec).unwrap();
        assert_eq!(samples.len(), 700);

        let d = spec.input_dim;
        let mut means = vec![vec![0.0; d]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for s in samples.iter().filter(|s| s.split == Split::Train) {
            counts[s.y] += 1;
            for (m, x) in means[s.y].iter_mut().zip(&s.x) {
                *m += x;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= n as f64;
            }
        }

        let mut correct = 0usize;
        let mut total = 0usize;
        for s in samples.iter().filter(|s| s.split == Split::Test) {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (y, m) in means.iter().enumerate() {
                let dist: f64 = m.iter().zip(&s.x).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = y;
                }
            }
            total += 1;
            if best == s.y {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-class-mean accuracy {acc}");
    }

    #[test]
    fn generated_tasks_partition_classes_and_splits_are_disjoint() {
        let (samples, _) = generate_benchmark(&toy_spec()).unwrap();
        let seq = split_tasks(&samples, &[6, 4]).unwrap();
        let mut seen = [false; 10];
        for task in seq.tasks() {
            for &c in &task.classes {
                assert!(!seen[c], "class {c} in two tasks");
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // cumulative sets are monotone
        assert_eq!(seq.cumulative_classes(1).len(), 6);
        assert_eq!(seq.cumulative_classes(2).len(), 10);
        for task in seq.tasks() {
            assert!(task.train.iter().all(|s| s.split == Split::Train));
            assert!(task.test.iter().all(|s| s.split == Split::Test));
        }
    }

    #[test]
    fn split_single_task_holds_everything() {
        let (samples, _) = generate_benchmark(&toy_spec()).unwrap();
        let seq = split_tasks(&samples, &[10]).unwrap();
        assert_eq!(seq.n_tasks(), 1);
        assert_eq!(seq.tasks()[0].train.len() + seq.tasks()[0].test.len(), 700);
    }

    #[test]
    fn split_assigns_classes_in_index_order() {
        let (samples, _) = generate_benchmark(&toy_spec()).unwrap();
        let seq = split_tasks(&samples, &[8, 2]).unwrap();
        assert_eq!(seq.tasks()[0].classes, (0..8).collect::<Vec<_>>());
        assert_eq!(seq.tasks()[1].classes, vec![8, 9]);
    }

    #[test]
    fn split_mirrors_cub_protocol_shape() {
        // 200 classes split 150/50, one sample each to keep it light
        let samples: Vec<Sample> = (0..200)
            .flat_map(|y| {
                [
                    Sample {
                        x: vec![y as f64],
                        y,
                        task: 0,
                        split: Split::Train,
                    },
                    Sample {
                        x: vec![y as f64],
                        y,
                        task: 0,
                        split: Split::Test,
                    },
                ]
            })
            .collect();
        let seq = split_tasks(&samples, &[150, 50]).unwrap();
        assert_eq!(seq.n_tasks(), 2);
        assert_eq!(seq.tasks()[0].classes.len(), 150);
        assert_eq!(seq.tasks()[1].classes.len(), 50);
        assert_eq!(seq.tasks()[1].classes[0], 150);
    }

    #[test]
    fn split_rejects_wrong_sum() {
        let (samples, _) = generate_benchmark(&toy_spec()).unwrap();
        assert!(matches!(
            split_tasks(&samples, &[5, 4]),
            Err(DataError::BadSplit { .. })
        ));
    }

    #[test]
    fn shuffled_split_is_seeded_and_still_partitions() {
        let (samples, _) = generate_benchmark(&toy_spec()).unwrap();
        let a = split_tasks_shuffled(&samples, &[6, 4], 3).unwrap();
        let b = split_tasks_shuffled(&samples, &[6, 4], 3).unwrap();
        assert_eq!(a.tasks()[0].classes, b.tasks()[0].classes);
        let c = split_tasks_shuffled(&samples, &[6, 4], 4).unwrap();
        let mut all: Vec<usize> = c
            .tasks()
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn describe_is_the_attribute_row() {
        let table =
            AttributeTable::from_rows(vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(table.describe(1).unwrap(), &[0.0, 1.0, 1.0]);
        assert!(matches!(
            table.describe(2),
            Err(DataError::ClassOutOfRange { class: 2, .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn describe_identity_is_onehot() {
        let table = AttributeTable::identity(4);
        assert_eq!(table.describe(2).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
        // equals transpose(A) . onehot(y) for every y
        for y in 0..4 {
            let onehot: Vec<f64> = (0..4).map(|c| f64::from(c == y)).collect();
            let via_product: Vec<f64> = (0..4)
                .map(|qi| {
                    (0..4)
                        .map(|c| table.describe(c).unwrap()[qi] * onehot[c])
                        .sum()
                })
                .collect();
            assert_eq!(table.describe(y).unwrap(), via_product.as_slice());
        }
    }

    /// Least-squares fit of a linear attribute-to-mean map; the residual
    /// must not grow as alpha rises (median over 5 seeds).
    #[test]
    #[allow(clippy::needless_range_loop)]
    fn alpha_monotonicity_of_linear_reconstruction() {
        fn residual(alpha: f64, seed: u64) -> f64 {
            let spec = BenchmarkSpec {
                alpha,
                seed,
                train_per_class: 30,
                test_per_class: 1,
                ..toy_spec()
            };
            let (samples, table) = generate_benchmark(&spec).unwrap();
            let (c, q, d) = (spec.classes, spec.attributes, spec.input_dim);

            let mut means = vec![vec![0.0; d]; c];
            let mut counts = vec![0usize; c];
            for s in samples.iter().filter(|s| s.split == Split::Train) {
                counts[s.y] += 1;
                for (m, x) in means[s.y].iter_mut().zip(&s.x) {
                    *m += x;
                }
            }
            for (m, &n) in means.iter_mut().zip(&counts) {
                for v in m.iter_mut() {
                    *v /= n as f64;
                }
            }

            // normal equations (AtA + eps I) W = At M, solved by Gaussian
            // elimination
            let mut ata = vec![vec![0.0; q]; q];
            let mut atm = vec![vec![0.0; d]; q];
            for y in 0..c {
                let a = table.describe(y).unwrap();
                for i in 0..q {
                    for j in 0..q {
                        ata[i][j] += a[i] * a[j];
                    }
                    for j in 0..d {
                        atm[i][j] += a[i] * means[y][j];
                    }
                }
            }
            for (i, row) in ata.iter_mut().enumerate() {
                row[i] += 1e-9;
            }
            // solve for each output dim
            let mut w = vec![vec![0.0; d]; q];
            for col in 0..d {
                let mut m = ata.clone();
                let mut rhs: Vec<f64> = (0..q).map(|i| atm[i][col]).collect();
                for i in 0..q {
                    let piv = (i..q)
                        .max_by(|&a, &b| m[a][i].abs().total_cmp(&m[b][i].abs()))
                        .unwrap();
                    m.swap(i, piv);
                    rhs.swap(i, piv);
                    let p = m[i][i];
                    for r in i + 1..q {
                        let f = m[r][i] / p;
                        for cc in i..q {
                            m[r][cc] -= f * m[i][cc];
                        }
                        rhs[r] -= f * rhs[i];
                    }
                }
                for i in (0..q).rev() {
                    let mut v = rhs[i];
                    for cc in i + 1..q {
                        v -= m[i][cc] * w[cc][col];
                    }
                    w[i][col] = v / m[i][i];
                }
            }

            let mut err = 0.0;
            for y in 0..c {
                let a = table.describe(y).unwrap();
                for j in 0..d {
                    let pred: f64 = (0..q).map(|i| a[i] * w[i][j]).sum();
                    let diff = pred - means[y][j];
                    err += diff * diff;
                }
            }
            err / (c * d) as f64
        }

        let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
        let mut medians = Vec::new();
        for &alpha in &alphas {
            let mut rs: Vec<f64> = (0..5).map(|s| residual(alpha, 100 + s)).collect();
            rs.sort_by(f64::total_cmp);
            medians.push(rs[2]);
        }
        for w in medians.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "residual increased along alpha: {medians:?}"
            );
        }
    }
}
