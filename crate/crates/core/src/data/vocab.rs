use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const BLANK: &str = "<blank>";

pub const TEXT_PAD: usize = 0;
pub const TEXT_BOS: usize = 1;
pub const TEXT_EOS: usize = 2;
pub const TEXT_UNK: usize = 3;

pub const GLOSS_BLANK: usize = 0;
pub const GLOSS_PAD: usize = 1;
pub const GLOSS_UNK: usize = 2;

const TEXT_SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];
const GLOSS_SPECIALS: [&str; 3] = [BLANK, PAD, UNK];

/// Token/index bijection. Specials take the lowest indices, the remaining
/// tokens follow in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn text<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(&TEXT_SPECIALS, tokens)
    }

    pub fn gloss<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(&GLOSS_SPECIALS, tokens)
    }

    fn build<'a>(specials: &[&str], tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = tokens
            .into_iter()
            .filter(|t| !specials.contains(t))
            .collect();
        let tokens: Vec<String> = specials
            .iter()
            .copied()
            .chain(sorted)
            .map(str::to_owned)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_text(&self) -> bool {
        self.tokens.first().map(String::as_str) == Some(PAD)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn unk(&self) -> usize {
        if self.is_text() {
            TEXT_UNK
        } else {
            GLOSS_UNK
        }
    }

    /// Index of `token`, falling back to `<unk>`.
    pub fn encode(&self, token: &str) -> usize {
        self.index(token).unwrap_or_else(|| self.unk())
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices
            .iter()
            .map(|&i| {
                self.token(i).map(str::to_owned).ok_or_else(|| {
                    Error::Vocabulary(format!("index {i} outside vocabulary of size {}", self.len()))
                })
            })
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        let specials: &[&str] = match tokens.first().map(String::as_str) {
            Some(PAD) => &TEXT_SPECIALS,
            Some(BLANK) => &GLOSS_SPECIALS,
            _ => return Err(Error::Vocabulary("vocabulary does not start with its specials".into())),
        };
        if tokens.len() < specials.len() || tokens.iter().zip(specials).any(|(t, s)| t != s) {
            return Err(Error::Vocabulary("vocabulary specials out of order".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Vocabulary("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
