//! Corpus files, vocabularies, padded batches and the synthetic task.

pub mod batch;
pub mod corpus;
pub mod sltf;
pub mod synthetic;
pub mod vocab;

pub use batch::{make_batch, make_batches, Batch, MAX_BATCH};
pub use corpus::{
    encode_samples, load_corpus, load_split, load_vocabularies, read_split, write_split, Corpus, RawSample, Sample, Split,
    Vocabularies,
};
pub use synthetic::{generate_synthetic, synthesize, SyntheticConfig, SyntheticCorpus};
pub use vocab::Vocabulary;
