//! Binary model checkpoints.
//!
//! One file per [`ModelBundle`]: an 8-byte magic, a version word, the
//! architecture dims, then every parameter as little-endian 64-bit reals
//! in declaration order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{CvaeModel, FeatureExtractor, JointClassifier, Linear, ModelBundle};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BIMAGCK1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

fn fmt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn linear(&mut self, l: &Linear) {
        self.tensor(&l.w);
        self.tensor(&l.b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(fmt("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn dim(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = self.take(8)?;
            data.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        Tensor::from_vec(rows, cols, data).map_err(|e| fmt(e.to_string()))
    }
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Result<Linear, CheckpointError> {
        Ok(Linear {
            w: self.tensor(fan_in, fan_out)?,
            b: self.tensor(1, fan_out)?,
        })
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_vae_dims(w: &mut Writer, vae: &CvaeModel) {
    w.u32(vae.feature_dim() as u32);
    w.u32(vae.cond_dim() as u32);
    w.u32(vae.latent_dim() as u32);
    let (h1, h2) = vae.enc_hidden();
    w.u32(h1 as u32);
    w.u32(h2 as u32);
    w.u32(vae.dec_hidden() as u32);
}

fn write_vae_params(w: &mut Writer, vae: &CvaeModel) {
    for part in vae.parts() {
        w.linear(part);
    }
}

fn read_vae(dims: &[usize; 6], r: &mut Reader) -> Result<CvaeModel, CheckpointError> {
    let [d, cond, latent, h1, h2, dech] = *dims;
    let trunk1 = r.linear(d + cond, h1)?;
    let trunk2 = r.linear(h1, h2)?;
    let head_mu = r.linear(h2, latent)?;
    let head_logvar = r.linear(h2, latent)?;
    let dec1 = r.linear(latent + cond, dech)?;
    let dec2 = r.linear(dech, d)?;
    Ok(CvaeModel::from_parts(
        d,
        cond,
        latent,
        trunk1,
        trunk2,
        head_mu,
        head_logvar,
        dec1,
        dec2,
    ))
}

/// Serialize a bundle to `path`.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    // extractor dims
    w.u32(bundle.extractor.input_dim() as u32);
    w.u32(bundle.extractor.layers().len() as u32);
    for l in bundle.extractor.layers() {
        w.u32(l.fan_out() as u32);
    }

    // classifier dims
    w.u32(bundle.classifier.feature_dim() as u32);
    w.u32(bundle.classifier.n_classes() as u32);
    w.u8(u8::from(bundle.classifier.b.is_some()));

    // generator dims
    let vaes: Vec<&CvaeModel> = [bundle.vae.as_ref(), bundle.forward_vae.as_ref()]
        .into_iter()
        .flatten()
        .collect();
    let has_forward = bundle.forward_vae.is_some();
    w.u8(vaes.len() as u8);
    w.u8(u8::from(has_forward));
    for vae in &vaes {
        write_vae_dims(&mut w, vae);
    }

    // parameters, declaration order
    for l in bundle.extractor.layers() {
        w.linear(l);
    }
    w.tensor(&bundle.classifier.w);
    if let Some(b) = &bundle.classifier.b {
        w.tensor(b);
    }
    for vae in &vaes {
        write_vae_params(&mut w, vae);
    }

    fs::write(path, &w.buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read a bundle back; the inverse of [`save_bundle`].
pub fn load_bundle(path: &Path) -> Result<ModelBundle, CheckpointError> {
    let buf = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(fmt("wrong magic; not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }

    let input_dim = r.dim()?;
    let n_layers = r.dim()?;
    let mut layer_dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_dims.push(r.dim()?);
    }

    let clf_features = r.dim()?;
    let clf_classes = r.dim()?;
    let clf_bias = r.u8()? != 0;

    let n_vaes = r.u8()? as usize;
    if n_vaes > 2 {
        return Err(fmt(format!("{n_vaes} generators; expected at most 2")));
    }
    let has_forward = r.u8()? != 0;
    if has_forward && n_vaes == 0 {
        return Err(fmt("forward generator flagged but no generators stored"));
    }
    let mut vae_dims = Vec::with_capacity(n_vaes);
    for _ in 0..n_vaes {
        vae_dims.push([r.dim()?, r.dim()?, r.dim()?, r.dim()?, r.dim()?, r.dim()?]);
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut fan_in = input_dim;
    for &out in &layer_dims {
        layers.push(r.linear(fan_in, out)?);
        fan_in = out;
    }
    let extractor = FeatureExtractor::from_layers(input_dim, layers);

    let w = r.tensor(clf_features, clf_classes)?;
    let b = if clf_bias {
        Some(r.tensor(1, clf_classes)?)
    } else {
        None
    };
    let classifier = JointClassifier { w, b };

    let mut vaes = Vec::with_capacity(n_vaes);
    for dims in &vae_dims {
        vaes.push(read_vae(dims, &mut r)?);
    }
    if !r.done() {
        return Err(fmt("trailing bytes after parameters"));
    }

    let mut it = vaes.into_iter();
    let (vae, forward_vae) = if has_forward {
        // backward generator first, forward second
        let backward = it.next();
        (backward, it.next())
    } else {
        (it.next(), None)
    };

    Ok(ModelBundle {
        extractor,
        classifier,
        vae,
        forward_vae,
    })
}
