//! The joint recognition and translation network and its decoding entry
//! points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Protocol};
use crate::data::vocab::{GLOSS_UNK, TEXT_BOS, TEXT_EOS, TEXT_PAD};
use crate::data::{Batch, Vocabularies};
use crate::decoding::{ar_beam_search, ar_greedy_batch, ctc_beam_search, ctc_greedy, DecodeConfig, Hypothesis, StepScorer};
use crate::embeddings::{add_positions, SpatialEmbedder, WordEmbedder};
use crate::losses::{ctc_log_prob, joint_loss, masked_translation_loss, recognition_loss, CtcTarget, LossMode, LossWeights};
use crate::numerics::{log_sum_exp, BatchStats, Tensor, Var};
use crate::params::{Forward, ParamStore};
use crate::transformer::{gloss_logits, slrt_encode, sltt_decode, DecoderStack, EncoderStack, SeqLayout};
use crate::{Error, Result};

/// Every protocol shares one parameter layout; a pass only binds the parts
/// it uses, so untouched parts never receive gradients.
#[derive(Clone, Debug)]
pub struct SignTransformer {
    pub protocol: Protocol,
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub d_in: usize,
    pub store: ParamStore,
    pub spatial: SpatialEmbedder,
    pub gloss_embedding: WordEmbedder,
    pub encoder: EncoderStack,
    pub word_embedding: WordEmbedder,
    pub decoder: DecoderStack,
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: Var,
    pub src: SeqLayout,
    /// Batch-norm statistics of the spatial embedding (train mode only).
    pub stats: Option<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recognition: Option<Var>,
    pub translation: Option<Var>,
    pub stats: Option<BatchStats>,
    /// Sequences left out of the recognition loss because they are too short
    /// for their gloss targets.
    pub skipped: usize,
}

impl SignTransformer {
    pub fn new(config: ModelConfig, protocol: Protocol, d_in: usize, vocabs: Vocabularies, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let dims = config.dims();
        let spatial = SpatialEmbedder::new(&mut store, "spatial", d_in, d, &mut rng);
        let gloss_embedding = WordEmbedder::new(&mut store, "gloss_embedding", vocabs.gloss.len(), d, &mut rng);
        let encoder = EncoderStack::new(&mut store, &dims, vocabs.gloss.len(), &mut rng)?;
        let word_embedding = WordEmbedder::new(&mut store, "word_embedding", vocabs.text.len(), d, &mut rng);
        let decoder = DecoderStack::new(&mut store, &dims, vocabs.text.len(), &mut rng)?;
        Ok(Self {
            protocol,
            config,
            vocabs,
            d_in,
            store,
            spatial,
            gloss_embedding,
            encoder,
            word_embedding,
            decoder,
        })
    }

    pub fn train_forward(&self, seed: u64) -> Forward<'_> {
        Forward::train(&self.store, self.config.dropout, seed)
    }

    pub fn eval_forward(&self) -> Forward<'_> {
        Forward::eval(&self.store)
    }

    /// Position-encoded source embeddings followed by the encoder stack.
    pub fn encode(&self, f: &mut Forward, batch: &Batch) -> Result<Encoded> {
        let (embedded, src, stats) = if self.protocol.uses_features() {
            let src = batch.source.clone();
            let x = f.graph.constant(batch.feature_rows());
            let (x, stats) = self.spatial.embed(f, x, &src.row_mask())?;
            (x, src, stats)
        } else {
            let src = batch
                .gloss_layout
                .clone()
                .ok_or_else(|| Error::Corpus("gloss-to-text input needs non-empty gloss sequences".into()))?;
            (self.gloss_embedding.embed(f, &batch.gloss_tokens)?, src, None)
        };
        let x = add_positions(f, embedded, src.batch(), src.max_len)?;
        let z = slrt_encode(f, x, &src, &self.encoder)?;
        Ok(Encoded { z, src, stats })
    }

    /// Frame-level gloss log-probabilities, one row per source row.
    pub fn gloss_log_probs(&self, f: &mut Forward, z: Var) -> Result<Var> {
        let logits = gloss_logits(f, z, &self.encoder)?;
        Ok(f.graph.log_softmax(logits))
    }

    /// Word logits for right-padded decoder inputs that start with `<bos>`.
    pub fn decode_logits(&self, f: &mut Forward, z: Var, src: &SeqLayout, inputs: &[usize], tgt: &SeqLayout) -> Result<Var> {
        let y = self.word_embedding.embed(f, inputs)?;
        let y = add_positions(f, y, tgt.batch(), tgt.max_len)?;
        sltt_decode(f, y, tgt, z, src, &self.decoder)
    }

    /// Weighted joint loss of a batch. Objectives with zero weight are not
    /// built at all.
    pub fn loss(&self, f: &mut Forward, batch: &Batch, weights: LossWeights, mode: LossMode) -> Result<LossTerms> {
        let enc = self.encode(f, batch)?;
        let mut skipped = 0;
        let recognition = if weights.recognition > 0.0 && self.protocol.recognizes() {
            let lp = self.gloss_log_probs(f, enc.z)?;
            let mut terms = Vec::new();
            for (b, glosses) in batch.glosses.iter().enumerate() {
                let frames = enc.src.lengths[b];
                let target = CtcTarget::new(glosses.clone())?;
                if !target.is_feasible(frames) {
                    log::warn!("sample {}: {frames} frames are too few for {} glosses, skipped", batch.ids[b], glosses.len());
                    skipped += 1;
                    continue;
                }
                let rows = f.graph.slice_rows(lp, b * enc.src.max_len, frames)?;
                let log_p = ctc_log_prob(&mut f.graph, rows, &target)?;
                terms.push(recognition_loss(&mut f.graph, log_p, mode));
            }
            mean(f, &terms)?
        } else {
            None
        };
        let translation = if weights.translation > 0.0 && self.protocol.translates() {
            let logits = self.decode_logits(f, enc.z, &enc.src, &batch.text_input, &batch.target)?;
            Some(masked_translation_loss(
                &mut f.graph,
                logits,
                &batch.text_output,
                &batch.target_mask(),
                batch.target.max_len,
                mode,
            )?)
        } else {
            None
        };
        let total = match (recognition, translation) {
            (None, None) => f.graph.constant(Tensor::scalar(0.0)),
            _ => joint_loss(&mut f.graph, recognition, translation, weights)?,
        };
        Ok(LossTerms {
            total,
            recognition,
            translation,
            stats: enc.stats,
            skipped,
        })
    }

    /// Encoder memories (`T_b x d`) and gloss log-probabilities (`T_b x |G|`)
    /// per sample, in eval mode.
    pub fn encode_eval(&self, batch: &Batch) -> Result<Vec<(Tensor, Tensor)>> {
        let mut f = self.eval_forward();
        let enc = self.encode(&mut f, batch)?;
        let lp = self.gloss_log_probs(&mut f, enc.z)?;
        let (z, lp) = (f.graph.value(enc.z), f.graph.value(lp));
        Ok(enc
            .src
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let start = b * enc.src.max_len;
                (rows(z, start, len), rows(lp, start, len))
            })
            .collect())
    }

    /// CTC gloss decoding; `beam_width` 0 or 1 means best path.
    pub fn recognize(&self, batch: &Batch, beam_width: usize) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .encode_eval(batch)?
            .iter()
            .map(|(_, lp)| {
                if beam_width <= 1 {
                    ctc_greedy(lp)
                } else {
                    ctc_beam_search(lp, beam_width)
                }
            })
            .collect())
    }

    /// Sentence decoding for every sample of `batch`. `max_lens` caps each
    /// output; widths 0 decode all samples greedily in one batch.
    pub fn translate(&self, batch: &Batch, cfg: &DecodeConfig, max_lens: &[usize]) -> Result<Vec<Hypothesis>> {
        let memories: Vec<Tensor> = self.encode_eval(batch)?.into_iter().map(|(z, _)| z).collect();
        self.translate_memories(memories, cfg, max_lens)
    }

    pub fn translate_memories(&self, memories: Vec<Tensor>, cfg: &DecodeConfig, max_lens: &[usize]) -> Result<Vec<Hypothesis>> {
        if cfg.beam_width == 0 {
            let cap = max_lens.iter().copied().max().unwrap_or(cfg.max_len);
            let mut scorer = DecoderScorer::per_prefix(self, memories);
            let mut hyps = ar_greedy_batch(&mut scorer, max_lens.len(), TEXT_EOS, cap)?;
            for (h, &limit) in hyps.iter_mut().zip(max_lens) {
                truncate(h, limit);
            }
            return Ok(hyps);
        }
        memories
            .into_iter()
            .zip(max_lens)
            .map(|(m, &limit)| {
                let mut scorer = DecoderScorer::shared(self, m);
                ar_beam_search(&mut scorer, TEXT_EOS, &DecodeConfig { max_len: limit, ..*cfg })
            })
            .collect()
    }
}

/// Drops greedy tokens emitted past `limit`.
fn truncate(h: &mut Hypothesis, limit: usize) {
    if h.tokens.len() > limit {
        h.tokens.truncate(limit);
        h.finished = false;
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())
}

fn mean(f: &mut Forward, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut total = first;
    for &t in rest {
        total = f.graph.add(total, t)?;
    }
    Ok(Some(f.graph.scale(total, 1.0 / terms.len() as f64)))
}

/// Output length cap: three times the source-length estimate, at most `cap`.
pub fn max_output_len(estimate: usize, cap: usize) -> usize {
    (3 * estimate.max(1)).min(cap).max(1)
}

/// Next-word distributions from the decoder given fixed encoder memories.
pub struct DecoderScorer<'m> {
    model: &'m SignTransformer,
    memories: Vec<Tensor>,
    per_prefix: bool,
}

impl<'m> DecoderScorer<'m> {
    /// All prefixes continue the same source.
    pub fn shared(model: &'m SignTransformer, memory: Tensor) -> Self {
        Self {
            model,
            memories: vec![memory],
            per_prefix: false,
        }
    }

    /// Prefix `i` continues source `i`.
    pub fn per_prefix(model: &'m SignTransformer, memories: Vec<Tensor>) -> Self {
        Self {
            model,
            memories,
            per_prefix: true,
        }
    }
}

impl StepScorer for DecoderScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocabs.text.len()
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mems: Vec<&Tensor> = (0..prefixes.len())
            .map(|i| &self.memories[if self.per_prefix { i } else { 0 }])
            .collect();
        let src = SeqLayout::new(mems.iter().map(|m| m.rows()).collect())?;
        let d = mems[0].cols();
        let mut memory = vec![0.0; src.rows() * d];
        for (b, m) in mems.iter().enumerate() {
            let start = b * src.max_len * d;
            memory[start..start + m.numel()].copy_from_slice(m.data());
        }
        let tgt = SeqLayout::new(prefixes.iter().map(|p| p.len() + 1).collect())?;
        let mut inputs = Vec::with_capacity(tgt.rows());
        for p in prefixes {
            inputs.push(TEXT_BOS);
            inputs.extend_from_slice(p);
            inputs.extend(std::iter::repeat_n(TEXT_PAD, tgt.max_len - p.len() - 1));
        }
        let mut f = self.model.eval_forward();
        let z = f.graph.constant(Tensor::matrix(src.rows(), d, memory));
        let logits = self.model.decode_logits(&mut f, z, &src, &inputs, &tgt)?;
        let logits = f.graph.value(logits);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = logits.row(b * tgt.max_len + p.len());
                let norm = log_sum_exp(row);
                row.iter().map(|v| v - norm).collect()
            })
            .collect())
    }
}

/// Replaces empty recognized gloss sequences with a single `<unk>` so that
/// they can still be fed to a gloss-to-text model.
pub fn non_empty_glosses(glosses: Vec<usize>) -> Vec<usize> {
    if glosses.is_empty() {
        vec![GLOSS_UNK]
    } else {
        glosses
    }
}
