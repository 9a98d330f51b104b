//! The parameterized networks: feature extractor, joint classifier, and
//! the conditional VAE, plus condition-vector construction.
//!
//! Models are plain parameter containers. A forward pass first binds the
//! parameters into a [`Graph`] (trainable or frozen), then builds ops on
//! node handles; `apply_*` helpers run the same forward on a scratch
//! graph for frozen/evaluation use. Binding once per graph means a
//! parameter used by several forwards (e.g. the decoder during replay
//! alignment) accumulates a single gradient.

pub mod checkpoint;

use crate::data::{AttributeTable, DataError};
use crate::rng::Prng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError, LOGVAR_MAX, LOGVAR_MIN};

/// One fully connected layer; weights `fan_in x fan_out`, bias `1 x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Prng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Tensor::zeros(fan_in, fan_out);
        for v in w.data_mut() {
            *v = (rng.uniform() * 2.0 - 1.0) * bound;
        }
        Linear {
            w,
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }

    pub fn n_params(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.cols()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let w = if trainable {
            g.param(self.w.clone())
        } else {
            g.constant(self.w.clone())
        };
        let b = if trainable {
            g.param(self.b.clone())
        } else {
            g.constant(self.b.clone())
        };
        BoundLinear { w, b }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    w: NodeId,
    b: NodeId,
}

impl BoundLinear {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        g.affine(x, self.w, self.b)
    }
}

/// MLP feature extractor F: input dim -> feature dim, ReLU after every
/// layer including the last, so features are nonnegative like the pooled
/// CNN features they stand in for. The output dimension stays fixed
/// across time steps; distillation compares feature spaces directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Linear>,
    input_dim: usize,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut Prng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Linear::new(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(Linear::new(fan_in, output_dim, rng));
        FeatureExtractor { layers, input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub(crate) fn from_layers(input_dim: usize, layers: Vec<Linear>) -> Self {
        FeatureExtractor { layers, input_dim }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundExtractor {
        BoundExtractor {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Untracked forward pass: z = F(x).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let out = self.bind(&mut g, false).forward(&mut g, xid)?;
        Ok(g.value(out).clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("extractor.l{i}.w"), format!("extractor.l{i}.b")])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum()
    }
}

pub struct BoundExtractor {
    layers: Vec<BoundLinear>,
}

impl BoundExtractor {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [g.grad_or_zeros(l.w), g.grad_or_zeros(l.b)])
            .collect()
    }
}

/// Linear classifier over the class universe: scores = z W (+ b). The
/// bias is off by default, matching the plain softmax(Wz) form.
#[derive(Debug, Clone, PartialEq)]
pub struct JointClassifier {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl JointClassifier {
    pub fn new(feature_dim: usize, classes: usize, bias: bool, rng: &mut Prng) -> Self {
        let l = Linear::new(feature_dim, classes, rng);
        JointClassifier {
            w: l.w,
            b: bias.then_some(l.b),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.w.cols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundClassifier {
        let mk = |g: &mut Graph, t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
        BoundClassifier {
            w: mk(g, self.w.clone()),
            b: self.b.clone().map(|b| mk(g, b)),
        }
    }

    /// Raw scores for a feature batch.
    pub fn scores(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let zid = g.constant(z.clone());
        let out = self.bind(&mut g, false).forward(&mut g, zid)?;
        Ok(g.value(out).clone())
    }

    /// Scores plus argmax predictions, ties broken toward the lowest
    /// class index.
    pub fn classify(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>), TensorError> {
        let scores = self.scores(z)?;
        let preds = argmax_rows(&scores);
        Ok((scores, preds))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w];
        if let Some(b) = &self.b {
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w];
        if let Some(b) = &mut self.b {
            out.push(b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["classifier.w".to_string()];
        if self.b.is_some() {
            out.push("classifier.b".to_string());
        }
        out
    }
}

pub struct BoundClassifier {
    w: NodeId,
    b: Option<NodeId>,
}

impl BoundClassifier {
    pub fn forward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, TensorError> {
        match self.b {
            Some(b) => g.affine(z, self.w, b),
            None => g.matmul(z, self.w),
        }
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        let mut out = vec![g.grad_or_zeros(self.w)];
        if let Some(b) = self.b {
            out.push(g.grad_or_zeros(b));
        }
        out
    }
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// What the generator is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    /// One-hot class label; the continual-learning reduction.
    Class,
    /// The attribute row G(y).
    Attr,
    /// One-hot label concatenated with the attribute row.
    ClassAttr,
}

impl ConditionMode {
    pub fn dim(self, table: &AttributeTable) -> usize {
        match self {
            ConditionMode::Class => table.n_classes(),
            ConditionMode::Attr => table.n_attributes(),
            ConditionMode::ClassAttr => table.n_classes() + table.n_attributes(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionMode::Class => "class",
            ConditionMode::Attr => "attr",
            ConditionMode::ClassAttr => "class_attr",
        }
    }
}

/// Condition vector for class `y`: one-hot, attribute row, or their
/// concatenation. With an identity attribute table, the attr condition
/// is elementwise equal to the class condition.
pub fn build_condition(
    mode: ConditionMode,
    y: usize,
    table: &AttributeTable,
) -> Result<Vec<f64>, DataError> {
    let c = table.n_classes();
    if y >= c {
        return Err(DataError::ClassOutOfRange {
            class: y,
            classes: c,
        });
    }
    let onehot = |y: usize| {
        let mut v = vec![0.0; c];
        v[y] = 1.0;
        v
    };
    Ok(match mode {
        ConditionMode::Class => onehot(y),
        ConditionMode::Attr => table.describe(y)?.to_vec(),
        ConditionMode::ClassAttr => {
            let mut v = onehot(y);
            v.extend_from_slice(table.describe(y)?);
            v
        }
    })
}

/// Condition matrix for a label batch, one row per label.
pub fn build_condition_batch(
    mode: ConditionMode,
    ys: &[usize],
    table: &AttributeTable,
) -> Result<Tensor, DataError> {
    let dim = mode.dim(table);
    let mut out = Tensor::zeros(ys.len(), dim);
    for (r, &y) in ys.iter().enumerate() {
        let cond = build_condition(mode, y, table)?;
        for (c, v) in cond.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    Ok(out)
}

/// Conditional VAE: encoder (z (+) cond) -> (mu, logvar) through two ReLU
/// trunk layers and two linear heads; decoder (r (+) cond) -> z_hat
/// through one ReLU layer and a linear output (features are unbounded
/// regression targets). Log-variances are clamped to the global range.
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    trunk1: Linear,
    trunk2: Linear,
    head_mu: Linear,
    head_logvar: Linear,
    dec1: Linear,
    dec2: Linear,
    feature_dim: usize,
    cond_dim: usize,
    latent_dim: usize,
}

impl CvaeModel {
    pub fn new(
        feature_dim: usize,
        cond_dim: usize,
        latent_dim: usize,
        enc_hidden: (usize, usize),
        dec_hidden: usize,
        rng: &mut Prng,
    ) -> Self {
        let (h1, h2) = enc_hidden;
        CvaeModel {
            trunk1: Linear::new(feature_dim + cond_dim, h1, rng),
            trunk2: Linear::new(h1, h2, rng),
            head_mu: Linear::new(h2, latent_dim, rng),
            head_logvar: Linear::new(h2, latent_dim, rng),
            dec1: Linear::new(latent_dim + cond_dim, dec_hidden, rng),
            dec2: Linear::new(dec_hidden, feature_dim, rng),
            feature_dim,
            cond_dim,
            latent_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn enc_hidden(&self) -> (usize, usize) {
        (self.trunk1.fan_out(), self.trunk2.fan_out())
    }

    pub fn dec_hidden(&self) -> usize {
        self.dec1.fan_out()
    }

    pub(crate) fn parts(&self) -> [&Linear; 6] {
        [
            &self.trunk1,
            &self.trunk2,
            &self.head_mu,
            &self.head_logvar,
            &self.dec1,
            &self.dec2,
        ]
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        feature_dim: usize,
        cond_dim: usize,
        latent_dim: usize,
        trunk1: Linear,
        trunk2: Linear,
        head_mu: Linear,
        head_logvar: Linear,
        dec1: Linear,
        dec2: Linear,
    ) -> Self {
        CvaeModel {
            trunk1,
            trunk2,
            head_mu,
            head_logvar,
            dec1,
            dec2,
            feature_dim,
            cond_dim,
            latent_dim,
        }
    }

    /// Warm-start this decoder from a previous model. Panics on dimension
    /// drift; the class universe and feature space are fixed per run.
    pub fn copy_decoder_from(&mut self, prev: &CvaeModel) {
        assert_eq!(self.dec1.w.shape(), prev.dec1.w.shape(), "decoder drifted");
        assert_eq!(self.dec2.w.shape(), prev.dec2.w.shape(), "decoder drifted");
        self.dec1 = prev.dec1.clone();
        self.dec2 = prev.dec2.clone();
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCvae {
        BoundCvae {
            trunk1: self.trunk1.bind(g, trainable),
            trunk2: self.trunk2.bind(g, trainable),
            head_mu: self.head_mu.bind(g, trainable),
            head_logvar: self.head_logvar.bind(g, trainable),
            dec1: self.dec1.bind(g, trainable),
            dec2: self.dec2.bind(g, trainable),
        }
    }

    /// Untracked encoder pass.
    pub fn apply_encode(&self, z: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let zid = g.constant(z.clone());
        let cid = g.constant(cond.clone());
        let (mu, lv) = self.bind(&mut g, false).encode(&mut g, zid, cid)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Untracked decoder pass.
    pub fn apply_decode(&self, r: &Tensor, cond: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let rid = g.constant(r.clone());
        let cid = g.constant(cond.clone());
        let out = self.bind(&mut g, false).decode(&mut g, rid, cid)?;
        Ok(g.value(out).clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.parts().iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.trunk1,
            &mut self.trunk2,
            &mut self.head_mu,
            &mut self.head_logvar,
            &mut self.dec1,
            &mut self.dec2,
        ]
        .into_iter()
        .flat_map(|l| [&mut l.w, &mut l.b])
        .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        ["trunk1", "trunk2", "head_mu", "head_logvar", "dec1", "dec2"]
            .iter()
            .flat_map(|n| [format!("cvae.{n}.w"), format!("cvae.{n}.b")])
            .collect()
    }

    pub fn decoder_params(&self) -> Vec<&Tensor> {
        vec![&self.dec1.w, &self.dec1.b, &self.dec2.w, &self.dec2.b]
    }

    pub fn n_params(&self) -> usize {
        self.parts().iter().map(|l| l.n_params()).sum()
    }
}

pub struct BoundCvae {
    trunk1: BoundLinear,
    trunk2: BoundLinear,
    head_mu: BoundLinear,
    head_logvar: BoundLinear,
    dec1: BoundLinear,
    dec2: BoundLinear,
}

impl BoundCvae {
    /// (mu, logvar) with logvar clamped to [LOGVAR_MIN, LOGVAR_MAX].
    pub fn encode(
        &self,
        g: &mut Graph,
        z: NodeId,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let joined = g.concat_cols(z, cond)?;
        let h1 = self.trunk1.forward(g, joined)?;
        let h1 = g.relu(h1);
        let h2 = self.trunk2.forward(g, h1)?;
        let h2 = g.relu(h2);
        let mu = self.head_mu.forward(g, h2)?;
        let lv = self.head_logvar.forward(g, h2)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    pub fn decode(&self, g: &mut Graph, r: NodeId, cond: NodeId) -> Result<NodeId, TensorError> {
        let joined = g.concat_cols(r, cond)?;
        let h = self.dec1.forward(g, joined)?;
        let h = g.relu(h);
        self.dec2.forward(g, h)
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        [
            self.trunk1,
            self.trunk2,
            self.head_mu,
            self.head_logvar,
            self.dec1,
            self.dec2,
        ]
        .iter()
        .flat_map(|l| [g.grad_or_zeros(l.w), g.grad_or_zeros(l.b)])
        .collect()
    }
}

/// Everything trained at one time step. Single-VAE variants fill `vae`;
/// the asymmetric variant keeps its class-conditioned backward generator
/// in `vae` and the attribute-conditioned forward generator in
/// `forward_vae`. Joint training carries no generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: FeatureExtractor,
    pub classifier: JointClassifier,
    pub vae: Option<CvaeModel>,
    pub forward_vae: Option<CvaeModel>,
}
