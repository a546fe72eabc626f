//! Post-norm transformer encoder (recognition) and decoder (translation)
//! stacks operating on right-padded batches.

use rand::Rng;

use crate::numerics::{AttentionLayout, Var};
use crate::params::{Forward, ParamId, ParamStore};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Sequence lengths of a right-padded batch laid out as `batch * max_len` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::Config(format!(
                "sequence lengths must be non-empty and positive, got {lengths:?}"
            )));
        }
        let max_len = *lengths.iter().max().expect("non-empty");
        Ok(Self { lengths, max_len })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.max_len
    }

    /// True for rows holding real content.
    pub fn row_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.rows());
        for &len in &self.lengths {
            mask.extend((0..self.max_len).map(|t| t < len));
        }
        mask
    }

    /// Every query row may attend to the real positions of its own sequence.
    pub fn key_padding_mask(&self, queries: usize) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.batch() * queries * self.max_len);
        for &len in &self.lengths {
            for _ in 0..queries {
                mask.extend((0..self.max_len).map(|j| j < len));
            }
        }
        mask
    }

    /// Query `i` may attend to positions `0..=i`.
    pub fn causal_mask(&self) -> Vec<bool> {
        let n = self.max_len;
        let mut mask = Vec::with_capacity(self.batch() * n * n);
        for _ in 0..self.batch() {
            for i in 0..n {
                mask.extend((0..n).map(|j| j <= i));
            }
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), d_in, d_out, rng),
            bias: store.zeros(format!("{name}.bias"), d_out),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let h = f.graph.matmul(x, w)?;
        Ok(f.graph.add_bias(h, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), d),
            bias: store.zeros(format!("{name}.bias"), d),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        Ok(f.graph.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Query/key/value/output projections of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }
}

/// Scaled dot-product attention over `heads` heads of width `d / heads`,
/// followed by the output projection. `queries` has `batch * n_queries` rows
/// and `keys_values` has `batch * n_keys` rows.
pub fn multi_head_attention(
    f: &mut Forward,
    queries: Var,
    keys_values: Var,
    n_queries: usize,
    n_keys: usize,
    mask: &[bool],
    params: &AttentionParams,
) -> Result<Var> {
    let batch = f.graph.value(queries).rows() / n_queries;
    let layout = AttentionLayout {
        batch,
        queries: n_queries,
        keys: n_keys,
        heads: params.heads,
    };
    let q = params.query.forward(f, queries)?;
    let k = params.key.forward(f, keys_values)?;
    let v = params.value.forward(f, keys_values)?;
    let dropout = f.dropout_multipliers(batch * params.heads * n_queries * n_keys);
    let attended = f.graph.attention(q, k, v, layout, mask, dropout)?;
    params.output.forward(f, attended)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.inner.forward(f, x)?;
        let h = f.graph.relu(h);
        let h = f.dropout(h)?;
        self.outer.forward(f, h)
    }
}

/// One transformer layer. Decoder layers carry a cross-attention sublayer and
/// a third normalization.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub self_attention: AttentionParams,
    pub cross_attention: Option<AttentionParams>,
    pub ffn: FeedForward,
    pub norms: Vec<LayerNormParams>,
}

impl AttentionBlock {
    pub fn encoder<R: Rng>(store: &mut ParamStore, name: &str, dims: &StackDims, rng: &mut R) -> Self {
        Self {
            self_attention: AttentionParams::new(store, &format!("{name}.self_attention"), dims.d_model, dims.heads, rng),
            cross_attention: None,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ff, rng),
            norms: (0..2)
                .map(|i| LayerNormParams::new(store, &format!("{name}.norm{i}"), dims.d_model))
                .collect(),
        }
    }

    pub fn decoder<R: Rng>(store: &mut ParamStore, name: &str, dims: &StackDims, rng: &mut R) -> Self {
        Self {
            self_attention: AttentionParams::new(store, &format!("{name}.self_attention"), dims.d_model, dims.heads, rng),
            cross_attention: Some(AttentionParams::new(
                store,
                &format!("{name}.cross_attention"),
                dims.d_model,
                dims.heads,
                rng,
            )),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.d_model, dims.d_ff, rng),
            norms: (0..3)
                .map(|i| LayerNormParams::new(store, &format!("{name}.norm{i}"), dims.d_model))
                .collect(),
        }
    }

    /// self-attention, add & norm, FFN, add & norm.
    pub fn encode(&self, f: &mut Forward, x: Var, src: &SeqLayout) -> Result<Var> {
        let n = src.max_len;
        let mask = src.key_padding_mask(n);
        let a = multi_head_attention(f, x, x, n, n, &mask, &self.self_attention)?;
        let x = f.graph.add(x, a)?;
        let x = self.norms[0].forward(f, x)?;
        let h = self.ffn.forward(f, x)?;
        let x = f.graph.add(x, h)?;
        self.norms[1].forward(f, x)
    }

    /// causal self-attention, add & norm, cross-attention over `memory`,
    /// add & norm, FFN, add & norm.
    pub fn decode(&self, f: &mut Forward, y: Var, tgt: &SeqLayout, memory: Var, src: &SeqLayout) -> Result<Var> {
        let cross = self
            .cross_attention
            .as_ref()
            .ok_or_else(|| Error::Config("decode called on an encoder block".into()))?;
        let u = tgt.max_len;
        let a = multi_head_attention(f, y, y, u, u, &tgt.causal_mask(), &self.self_attention)?;
        let y = f.graph.add(y, a)?;
        let y = self.norms[0].forward(f, y)?;
        let c = multi_head_attention(f, y, memory, u, src.max_len, &src.key_padding_mask(u), cross)?;
        let y = f.graph.add(y, c)?;
        let y = self.norms[1].forward(f, y)?;
        let h = self.ffn.forward(f, y)?;
        let y = f.graph.add(y, h)?;
        self.norms[2].forward(f, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackDims {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
}

impl StackDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        Ok(())
    }
}

/// Recognition transformer: encoder layers, final norm, gloss projection
/// (column 0 is the CTC blank).
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<AttentionBlock>,
    pub final_norm: LayerNormParams,
    pub gloss_projection: Linear,
}

impl EncoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &StackDims, gloss_classes: usize, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            layers: (0..dims.layers)
                .map(|i| AttentionBlock::encoder(store, &format!("encoder.layer{i}"), dims, rng))
                .collect(),
            final_norm: LayerNormParams::new(store, "encoder.final_norm", dims.d_model),
            gloss_projection: Linear::new(store, "encoder.gloss_projection", dims.d_model, gloss_classes, rng),
        })
    }
}

/// z_{1:T} from position-encoded source embeddings.
pub fn slrt_encode(f: &mut Forward, embedded: Var, src: &SeqLayout, stack: &EncoderStack) -> Result<Var> {
    let mut x = embedded;
    for layer in &stack.layers {
        x = layer.encode(f, x, src)?;
    }
    stack.final_norm.forward(f, x)
}

/// Frame-level gloss logits.
pub fn gloss_logits(f: &mut Forward, z: Var, stack: &EncoderStack) -> Result<Var> {
    stack.gloss_projection.forward(f, z)
}

/// Translation transformer: decoder layers, final norm, word projection.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<AttentionBlock>,
    pub final_norm: LayerNormParams,
    pub word_projection: Linear,
}

impl DecoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &StackDims, words: usize, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            layers: (0..dims.layers)
                .map(|i| AttentionBlock::decoder(store, &format!("decoder.layer{i}"), dims, rng))
                .collect(),
            final_norm: LayerNormParams::new(store, "decoder.final_norm", dims.d_model),
            word_projection: Linear::new(store, "decoder.word_projection", dims.d_model, words, rng),
        })
    }
}

/// Word logits for every target position; row `u` only sees target rows
/// `0..=u` and the real source positions.
pub fn sltt_decode(
    f: &mut Forward,
    embedded: Var,
    tgt: &SeqLayout,
    z: Var,
    src: &SeqLayout,
    stack: &DecoderStack,
) -> Result<Var> {
    let mut y = embedded;
    for layer in &stack.layers {
        y = layer.decode(f, y, tgt, z, src)?;
    }
    let y = stack.final_norm.forward(f, y)?;
    stack.word_projection.forward(f, y)
}
