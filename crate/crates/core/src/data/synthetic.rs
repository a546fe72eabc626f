//! Seeded toy task with a non-monotonic gloss-to-sentence mapping.
//!
//! Every gloss owns a random base vector; each occurrence of the gloss emits
//! 2 to 4 frames of that vector plus N(0, 0.1^2) noise. The sentence is the
//! gloss sequence reversed and lower-cased, with one function word inserted
//! before every word except the first; the function word is
//! `FUNCTION_WORDS[id % 5]` where `id` is the inventory index of the gloss
//! that follows it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::corpus::{write_split, RawSample, Split};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const FUNCTION_WORDS: [&str; 5] = ["the", "of", "and", "to", "in"];
pub const NOISE_STD: f64 = 0.1;
pub const MIN_GLOSSES: usize = 3;
pub const MAX_GLOSSES: usize = 8;
pub const MIN_FRAMES_PER_GLOSS: usize = 2;
pub const MAX_FRAMES_PER_GLOSS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Training samples; dev and test get a tenth each (at least one).
    pub n_samples: usize,
    pub gloss_vocab: usize,
    pub d_in: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 2000,
            gloss_vocab: 20,
            d_in: 16,
        }
    }
}

impl SyntheticConfig {
    pub fn held_out(&self) -> usize {
        (self.n_samples / 10).max(1)
    }
}

/// `A`..`Z`, then `G26`, `G27`, ...
pub fn gloss_name(id: usize) -> String {
    if id < 26 {
        char::from(b'A' + id as u8).to_string()
    } else {
        format!("G{id}")
    }
}

/// Sentence for a gloss sequence given as inventory indices.
pub fn rewrite(glosses: &[usize]) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * glosses.len());
    for (i, &g) in glosses.iter().rev().enumerate() {
        if i > 0 {
            out.push(FUNCTION_WORDS[g % FUNCTION_WORDS.len()].to_owned());
        }
        out.push(gloss_name(g).to_lowercase());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<RawSample>,
    pub dev: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &[RawSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.gloss_vocab < 2 || cfg.d_in == 0 || cfg.n_samples == 0 {
        return Err(Error::Config(format!(
            "synthetic corpus needs gloss_vocab >= 2, d_in >= 1 and n_samples >= 1, got {cfg:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bases: Vec<Vec<f64>> = (0..cfg.gloss_vocab)
        .map(|_| (0..cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut make = |split: Split, n: usize| -> Vec<RawSample> {
        (0..n)
            .map(|i| {
                let len = rng.random_range(MIN_GLOSSES..=MAX_GLOSSES);
                let mut glosses: Vec<usize> = Vec::with_capacity(len);
                while glosses.len() < len {
                    let g = rng.random_range(0..cfg.gloss_vocab);
                    if glosses.last() != Some(&g) {
                        glosses.push(g);
                    }
                }
                let mut data = Vec::new();
                for &g in &glosses {
                    for _ in 0..rng.random_range(MIN_FRAMES_PER_GLOSS..=MAX_FRAMES_PER_GLOSS) {
                        data.extend(bases[g].iter().map(|b| (b + noise.sample(&mut rng)) as f32 as f64));
                    }
                }
                RawSample {
                    id: format!("{split}-{i:05}"),
                    features: Tensor::matrix(data.len() / cfg.d_in, cfg.d_in, data),
                    text: rewrite(&glosses),
                    glosses: glosses.iter().map(|&g| gloss_name(g)).collect(),
                }
            })
            .collect()
    };
    let train = make(Split::Train, cfg.n_samples);
    let dev = make(Split::Dev, cfg.held_out());
    let test = make(Split::Test, cfg.held_out());
    Ok(SyntheticCorpus { train, dev, test })
}

/// Writes train/dev/test manifests and feature files under `dir`.
pub fn generate_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let corpus = synthesize(cfg)?;
    for split in Split::ALL {
        write_split(dir, split, corpus.split(split))?;
    }
    Ok(corpus)
}
