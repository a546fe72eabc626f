//! Source/target embeddings and sinusoidal positions.

use rand::Rng;

use crate::numerics::{BatchStats, Tensor, Var};
use crate::params::{Forward, ParamId, ParamStore};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `T x d_in` precomputed frame features standing in for a video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Corpus(format!(
                "feature sequence must be T x d, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Corpus("feature sequence has non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

/// Linear projection of frame features, batch normalization over time, ReLU.
#[derive(Clone, Debug)]
pub struct SpatialEmbedder {
    pub projection: ParamId,
    pub bias: ParamId,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    d_in: usize,
}

impl SpatialEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d: usize, rng: &mut R) -> Self {
        Self {
            projection: store.xavier(format!("{prefix}.projection.weight"), d_in, d, rng),
            bias: store.zeros(format!("{prefix}.projection.bias"), d),
            bn_gain: store.ones(format!("{prefix}.bn.gain"), d),
            bn_bias: store.zeros(format!("{prefix}.bn.bias"), d),
            running_mean: store.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[d]), false),
            running_var: store.add(format!("{prefix}.bn.running_var"), Tensor::full(&[d], 1.0), false),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            d_in,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    /// Embeds the rows of `x` (`rows x d_in`). Normalization statistics come
    /// from the rows flagged in `row_mask` in train mode and from the running
    /// estimates in eval mode. Unflagged rows come out as zeros.
    pub fn embed(&self, f: &mut Forward, x: Var, row_mask: &[bool]) -> Result<(Var, Option<BatchStats>)> {
        let cols = f.graph.value(x).cols();
        if cols != self.d_in {
            return Err(Error::Tensor(crate::numerics::TensorError::Shape {
                op: "spatial_embed",
                left: f.graph.value(x).shape().to_vec(),
                right: vec![self.d_in],
            }));
        }
        let w = f.param(self.projection);
        let b = f.param(self.bias);
        let gain = f.param(self.bn_gain);
        let shift = f.param(self.bn_bias);
        let h = f.graph.matmul(x, w)?;
        let h = f.graph.add_bias(h, b)?;
        let store = f.store();
        let running = (!f.is_train()).then(|| {
            (
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
            )
        });
        let (normed, stats) = f.graph.batch_norm(h, gain, shift, row_mask, self.eps, running)?;
        Ok((f.graph.relu(normed), stats))
    }

    /// Exponential moving update of the running statistics; the variance
    /// estimate is unbiased.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Convenience wrapper embedding a single sequence outside of a model.
pub fn spatial_embed(seq: &FeatureSequence, emb: &SpatialEmbedder, store: &ParamStore, train: bool) -> Result<Tensor> {
    let mut f = if train {
        Forward::train(store, 0.0, 0)
    } else {
        Forward::eval(store)
    };
    let x = f.graph.constant(seq.frames().clone());
    let (out, _) = emb.embed(&mut f, x, &vec![true; seq.len()])?;
    Ok(f.graph.value(out).clone())
}

/// Lookup table for target words (and, for text-to-text runs, source glosses).
#[derive(Clone, Debug)]
pub struct WordEmbedder {
    pub table: ParamId,
    vocab: usize,
}

impl WordEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut R) -> Self {
        Self {
            table: store.xavier(format!("{name}.table"), vocab, d, rng),
            vocab,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn embed(&self, f: &mut Forward, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Vocabulary(format!(
                "token index {bad} outside vocabulary of size {}",
                self.vocab
            )));
        }
        let table = f.param(self.table);
        Ok(f.graph.gather_rows(table, tokens)?)
    }
}

pub fn word_embed(tokens: &[usize], emb: &WordEmbedder, store: &ParamStore) -> Result<Tensor> {
    let mut f = Forward::eval(store);
    let out = emb.embed(&mut f, tokens)?;
    Ok(f.graph.value(out).clone())
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding(length: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    if length == 0 {
        return Err(Error::Config("positional encoding of length 0".into()));
    }
    let mut data = vec![0.0; length * d];
    for pos in 0..length {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(length, d, data))
}

/// Adds positions to a right-padded batch laid out as `batch * max_len` rows
/// and applies embedding dropout.
pub fn add_positions(f: &mut Forward, x: Var, batch: usize, max_len: usize) -> Result<Var> {
    let d = f.graph.value(x).cols();
    let pe = positional_encoding(max_len, d)?;
    let mut tiled = Vec::with_capacity(batch * max_len * d);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = f.graph.constant(Tensor::matrix(batch * max_len, d, tiled));
    let x = f.graph.add(x, pe)?;
    Ok(f.dropout(x)?)
}
