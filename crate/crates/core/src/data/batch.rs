use super::corpus::Sample;
use super::vocab::{GLOSS_PAD, TEXT_BOS, TEXT_EOS, TEXT_PAD};
use crate::numerics::Tensor;
use crate::transformer::SeqLayout;
use crate::{Error, Result};

pub const MAX_BATCH: usize = 32;

/// Right-padded samples. Sequence tensors are laid out as `batch * max_len`
/// rows; the layouts carry the true lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B x T_max x d_in`.
    pub features: Tensor,
    pub source: SeqLayout,
    /// Unpadded gloss targets.
    pub glosses: Vec<Vec<usize>>,
    /// `B * N_max` gloss indices padded with `<pad>`, used as text input by
    /// gloss-to-text runs.
    pub gloss_tokens: Vec<usize>,
    /// `None` when some sample has an empty gloss sequence.
    pub gloss_layout: Option<SeqLayout>,
    /// `<bos> ++ sentence`, padded.
    pub text_input: Vec<usize>,
    /// `sentence ++ <eos>`, padded.
    pub text_output: Vec<usize>,
    pub target: SeqLayout,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn source_mask(&self) -> Vec<bool> {
        self.source.row_mask()
    }

    pub fn target_mask(&self) -> Vec<bool> {
        self.target.row_mask()
    }

    /// Features flattened to `(B * T_max) x d_in`.
    pub fn feature_rows(&self) -> Tensor {
        let d = self.features.cols();
        Tensor::matrix(self.features.numel() / d, d, self.features.data().to_vec())
    }
}

fn pad(seqs: impl Iterator<Item = Vec<usize>>, max_len: usize, fill: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for mut s in seqs {
        s.resize(max_len, fill);
        out.extend(s);
    }
    out
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot batch an empty sample list".into()))?;
    let d = first.features.dim();
    let source = SeqLayout::new(samples.iter().map(|s| s.frames()).collect())?;
    let mut features = vec![0.0; source.rows() * d];
    for (b, s) in samples.iter().enumerate() {
        if s.features.dim() != d {
            return Err(Error::Corpus(format!("sample {} has feature width {}, expected {d}", s.id, s.features.dim())));
        }
        let start = b * source.max_len * d;
        features[start..start + s.frames() * d].copy_from_slice(s.features.frames().data());
    }
    let features = Tensor::new(vec![samples.len(), source.max_len, d], features)?;

    let gloss_layout = SeqLayout::new(samples.iter().map(|s| s.glosses.len()).collect()).ok();
    let gloss_max = samples.iter().map(|s| s.glosses.len()).max().unwrap_or(0);
    let gloss_tokens = pad(samples.iter().map(|s| s.glosses.clone()), gloss_max, GLOSS_PAD);

    let target = SeqLayout::new(samples.iter().map(|s| s.sentence.len() + 1).collect())?;
    let text_input = pad(
        samples.iter().map(|s| std::iter::once(TEXT_BOS).chain(s.sentence.iter().copied()).collect()),
        target.max_len,
        TEXT_PAD,
    );
    let text_output = pad(
        samples.iter().map(|s| s.sentence.iter().copied().chain(std::iter::once(TEXT_EOS)).collect()),
        target.max_len,
        TEXT_PAD,
    );

    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        features,
        source,
        glosses: samples.iter().map(|s| s.glosses.clone()).collect(),
        gloss_tokens,
        gloss_layout,
        text_input,
        text_output,
        target,
    })
}

/// Consecutive batches of at most `max_batch` samples, in order.
pub fn make_batches(samples: &[Sample], max_batch: usize) -> Result<Vec<Batch>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    refs.chunks(max_batch.max(1)).map(make_batch).collect()
}
