use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sltf::{read_features, write_features};
use super::vocab::Vocabulary;
use crate::embeddings::FeatureSequence;
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A sample in string form, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub features: Tensor,
    pub glosses: Vec<String>,
    pub text: Vec<String>,
}

/// Features, gloss indices and sentence indices (without `<bos>`/`<eos>`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureSequence,
    pub glosses: Vec<usize>,
    pub sentence: Vec<usize>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.len()
    }

    pub fn to_raw(&self, vocabs: &Vocabularies) -> Result<RawSample> {
        Ok(RawSample {
            id: self.id.clone(),
            features: self.features.frames().clone(),
            glosses: vocabs.gloss.decode(&self.glosses)?,
            text: vocabs.text.decode(&self.sentence)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub gloss: Vocabulary,
    pub text: Vocabulary,
}

impl Vocabularies {
    pub fn from_samples(train: &[RawSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Corpus("training split is empty".into()));
        }
        Ok(Self {
            gloss: Vocabulary::gloss(train.iter().flat_map(|s| s.glosses.iter().map(String::as_str))),
            text: Vocabulary::text(train.iter().flat_map(|s| s.text.iter().map(String::as_str))),
        })
    }
}

/// One split plus the vocabularies built from the training split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub vocabs: Vocabularies,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    features: String,
    gloss: String,
    text: String,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Reads `{dir}/{split}.jsonl` and the feature files it references.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<RawSample>> {
    let path = manifest_path(dir, split);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            id: record_id(&line).unwrap_or_else(|| format!("{}:{}", path.display(), n + 1)),
            reason: e.to_string(),
        })?;
        let features = read_features(&dir.join(&record.features)).map_err(|e| Error::Parse {
            id: record.id.clone(),
            reason: e.to_string(),
        })?;
        out.push(RawSample {
            id: record.id,
            features,
            glosses: record.gloss.split_whitespace().map(str::to_owned).collect(),
            text: record.text.split_whitespace().map(str::to_owned).collect(),
        });
    }
    Ok(out)
}

fn record_id(line: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.get("id")?.as_str().map(str::to_owned)
}

/// Writes the manifest and one feature file per sample under `features/`.
pub fn write_split(dir: &Path, split: Split, samples: &[RawSample]) -> Result<()> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let path = manifest_path(dir, split);
    let mut manifest = Vec::new();
    for s in samples {
        let rel = format!("features/{}.sltf", s.id);
        write_features(&dir.join(&rel), &s.features)?;
        let record = Record {
            id: s.id.clone(),
            features: rel,
            gloss: s.glosses.join(" "),
            text: s.text.join(" "),
        };
        serde_json::to_writer(&mut manifest, &record).map_err(|e| Error::Corpus(e.to_string()))?;
        manifest.push(b'\n');
    }
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&manifest).map_err(|e| Error::io(&path, e))
}

/// Maps raw samples to indices, rejecting samples with fewer frames than
/// glosses.
pub fn encode_samples(raw: Vec<RawSample>, vocabs: &Vocabularies) -> Result<Vec<Sample>> {
    let mut short = 0usize;
    let mut dim = None;
    let mut out = Vec::with_capacity(raw.len());
    for r in raw {
        let frames = r.features.rows();
        if frames < r.glosses.len() {
            return Err(Error::Corpus(format!(
                "sample {}: {frames} frames cannot carry {} glosses",
                r.id,
                r.glosses.len()
            )));
        }
        if frames < 2 * r.glosses.len() + 1 {
            short += 1;
        }
        let d = r.features.cols();
        if *dim.get_or_insert(d) != d {
            return Err(Error::Corpus(format!(
                "sample {}: feature width {d} differs from {}",
                r.id,
                dim.unwrap_or(d)
            )));
        }
        let features = FeatureSequence::new(r.features).map_err(|e| Error::Parse {
            id: r.id.clone(),
            reason: e.to_string(),
        })?;
        out.push(Sample {
            glosses: vocabs.gloss.encode_all(&r.glosses),
            sentence: vocabs.text.encode_all(&r.text),
            id: r.id,
            features,
        });
    }
    if short > 0 {
        log::warn!("{short} samples have fewer than 2N+1 frames for N glosses");
    }
    Ok(out)
}

pub fn load_vocabularies(dir: &Path) -> Result<Vocabularies> {
    Vocabularies::from_samples(&read_split(dir, Split::Train)?)
}

/// Loads one split with vocabularies built from the training split.
pub fn load_corpus(dir: &Path, split: Split) -> Result<Corpus> {
    let train = read_split(dir, Split::Train)?;
    let vocabs = Vocabularies::from_samples(&train)?;
    let raw = if split == Split::Train {
        train
    } else {
        read_split(dir, split)?
    };
    let samples = encode_samples(raw, &vocabs)?;
    Ok(Corpus { samples, vocabs })
}

/// Loads a split against vocabularies fixed elsewhere (e.g. a checkpoint).
pub fn load_split(dir: &Path, split: Split, vocabs: &Vocabularies) -> Result<Vec<Sample>> {
    encode_samples(read_split(dir, split)?, vocabs)
}
