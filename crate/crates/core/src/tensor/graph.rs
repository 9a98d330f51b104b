//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a flat tape: nodes are appended in execution order, so
//! insertion order is already a topological order and the backward pass
//! is a single reverse scan. Graphs are rebuilt per minibatch, owned by
//! one thread at a time, and never shared mutably.

use super::{Tensor, TensorError};
use crate::rng::Prng;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    /// y = x W + b, bias broadcast over rows.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// y = x W.
    Matmul {
        x: NodeId,
        w: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    /// Horizontal concatenation; `split` is the left operand's width.
    ConcatCols {
        a: NodeId,
        b: NodeId,
        split: usize,
    },
    /// Entries outside [lo, hi] are pinned; their gradient is zero.
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Mean over rows of -log softmax(logits)[label]; softmax probabilities
    /// are cached for the backward pass.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// Mean over rows of the squared Euclidean distance.
    L2Distance {
        p: NodeId,
        q: NodeId,
    },
    /// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)).
    GaussianKl {
        mu: NodeId,
        logvar: NodeId,
    },
    /// mu + exp(logvar/2) * noise; gradient flows through mu and logvar only.
    Reparameterize {
        mu: NodeId,
        logvar: NodeId,
        noise: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. One backward pass per graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` for nodes that
    /// do not require gradients or were not reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a parameter leaf, zeros if the loss never touched it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match self.nodes[id.0].grad.as_ref() {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[id.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Trainable leaf: receives a gradient slot.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: backward never allocates a gradient for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: xv.shape(),
                rhs: wv.shape(),
            });
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "affine bias",
                lhs: bv.shape(),
                rhs: (1, wv.cols()),
            });
        }
        let mut y = xv.matmul(wv)?;
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let v = y.get(r, c) + bv.get(0, c);
                y.set(r, c, v);
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Affine { x, w, b }, ng))
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let y = self.value(x).matmul(self.value(w))?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(y, Op::Matmul { x, w }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.needs(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).scale(factor);
        let ng = self.needs(x);
        self.push(y, Op::Scale { x, factor }, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, ng)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let split = self.value(a).cols();
        let y = self.value(a).concat_cols(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::ConcatCols { a, b, split }, ng))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = v.clamp(lo, hi);
        }
        let ng = self.needs(x);
        self.push(y, Op::Clamp { x, lo, hi }, ng)
    }

    /// Mean over rows of -log softmax(logits)[label], stabilized by
    /// max-subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if n == 0 {
            return Err(TensorError::EmptyInput {
                op: "softmax_cross_entropy",
            });
        }
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy labels",
                lhs: (labels.len(), 1),
                rhs: (n, 1),
            });
        }
        for &y in labels {
            if y >= k {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
        }
        let probs = lv.softmax_rows();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += -(row[y] - m - log_sum);
        }
        loss /= n as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of the squared Euclidean distance between `p` and `q`.
    pub fn l2_distance(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, TensorError> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "l2_distance",
                lhs: pv.shape(),
                rhs: qv.shape(),
            });
        }
        if pv.rows() == 0 {
            return Err(TensorError::EmptyInput { op: "l2_distance" });
        }
        let sq: f64 = pv
            .data()
            .iter()
            .zip(qv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let loss = sq / pv.rows() as f64;
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(Tensor::scalar(loss), Op::L2Distance { p, q }, ng))
    }

    /// Mean over rows of KL(N(mu, diag exp(logvar)) || N(0, I)).
    pub fn gaussian_kl(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId, TensorError> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_kl",
                lhs: mv.shape(),
                rhs: lv.shape(),
            });
        }
        if mv.rows() == 0 {
            return Err(TensorError::EmptyInput { op: "gaussian_kl" });
        }
        if !mv.all_finite() || !lv.all_finite() {
            return Err(TensorError::NonFinite {
                context: "gaussian_kl input".into(),
            });
        }
        let mut total = 0.0;
        for (m, l) in mv.data().iter().zip(lv.data()) {
            total += 0.5 * (l.exp() + m * m - 1.0 - l);
        }
        let loss = total / mv.rows() as f64;
        let ng = self.needs(mu) || self.needs(logvar);
        Ok(self.push(Tensor::scalar(loss), Op::GaussianKl { mu, logvar }, ng))
    }

    /// mu + exp(logvar/2) * eps with eps drawn from `rng`.
    pub fn reparameterize(
        &mut self,
        mu: NodeId,
        logvar: NodeId,
        rng: &mut Prng,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(mu).shape();
        let noise = Tensor::randn(r, c, rng);
        self.reparameterize_with(mu, logvar, noise)
    }

    /// [`Graph::reparameterize`] with caller-supplied noise.
    pub fn reparameterize_with(
        &mut self,
        mu: NodeId,
        logvar: NodeId,
        noise: Tensor,
    ) -> Result<NodeId, TensorError> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: mv.shape(),
                rhs: lv.shape(),
            });
        }
        if noise.shape() != mv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize noise",
                lhs: noise.shape(),
                rhs: mv.shape(),
            });
        }
        let mut y = mv.clone();
        for ((out, l), e) in y.data_mut().iter_mut().zip(lv.data()).zip(noise.data()) {
            *out += (l / 2.0).exp() * e;
        }
        let ng = self.needs(mu) || self.needs(logvar);
        Ok(self.push(y, Op::Reparameterize { mu, logvar, noise }, ng))
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.add_scaled(delta, 1.0),
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse accumulation from a scalar loss. Calling twice on the same
    /// graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NotAScalar {
                op: "backward",
                shape,
            });
        }
        self.backward_ran = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let grad = match self.nodes[id].grad.as_ref() {
                Some(g) if self.nodes[id].needs_grad => g.clone(),
                _ => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    if self.needs(x) {
                        let dx = grad.matmul(&self.value(w).transpose())?;
                        self.accumulate(x, &dx);
                    }
                    if self.needs(w) {
                        let dw = self.value(x).transpose().matmul(&grad)?;
                        self.accumulate(w, &dw);
                    }
                    if self.needs(b) {
                        let mut db = Tensor::zeros(1, grad.cols());
                        for r in 0..grad.rows() {
                            for c in 0..grad.cols() {
                                let v = db.get(0, c) + grad.get(r, c);
                                db.set(0, c, v);
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Matmul { x, w } => {
                    if self.needs(x) {
                        let dx = grad.matmul(&self.value(w).transpose())?;
                        self.accumulate(x, &dx);
                    }
                    if self.needs(w) {
                        let dw = self.value(x).transpose().matmul(&grad)?;
                        self.accumulate(w, &dw);
                    }
                }
                Op::Relu { x } => {
                    let mut dx = grad.clone();
                    for (d, v) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Scale { x, factor } => {
                    let dx = grad.scale(factor);
                    self.accumulate(x, &dx);
                }
                Op::Sum { x } => {
                    let (r, c) = self.value(x).shape();
                    let dx = Tensor::filled(r, c, grad.item());
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { a, b, split } => {
                    let (rows, cols) = grad.shape();
                    let mut da = Tensor::zeros(rows, split);
                    let mut db = Tensor::zeros(rows, cols - split);
                    for r in 0..rows {
                        for c in 0..split {
                            da.set(r, c, grad.get(r, c));
                        }
                        for c in split..cols {
                            db.set(r, c - split, grad.get(r, c));
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = grad.clone();
                    for (d, v) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if *v < lo || *v > hi {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len() as f64;
                    let g = grad.item();
                    let mut dl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = dl.get(r, y) - 1.0;
                        dl.set(r, y, v);
                    }
                    let dl = dl.scale(g / n);
                    self.accumulate(logits, &dl);
                }
                Op::L2Distance { p, q } => {
                    let g = grad.item();
                    let n = self.value(p).rows() as f64;
                    let diff = self.value(p).sub(self.value(q))?;
                    let dp = diff.scale(2.0 * g / n);
                    let dq = diff.scale(-2.0 * g / n);
                    self.accumulate(p, &dp);
                    self.accumulate(q, &dq);
                }
                Op::GaussianKl { mu, logvar } => {
                    let g = grad.item();
                    let n = self.value(mu).rows() as f64;
                    let dmu = self.value(mu).scale(g / n);
                    let mut dlv = self.value(logvar).clone();
                    for v in dlv.data_mut() {
                        *v = 0.5 * (v.exp() - 1.0) * g / n;
                    }
                    self.accumulate(mu, &dmu);
                    self.accumulate(logvar, &dlv);
                }
                Op::Reparameterize { mu, logvar, noise } => {
                    self.accumulate(mu, &grad);
                    let mut dlv = grad.clone();
                    for ((d, l), e) in dlv
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[logvar.0].value.data())
                        .zip(noise.data())
                    {
                        *d *= 0.5 * (l / 2.0).exp() * e;
                    }
                    self.accumulate(logvar, &dlv);
                }
            }
        }
        Ok(())
    }
}
