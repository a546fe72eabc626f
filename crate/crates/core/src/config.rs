//! Run configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::{LossMode, LossWeights};
use crate::transformer::StackDims;
use crate::{Error, Result};

/// Which inputs and objectives a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "sign2gloss")]
    Sign2Gloss,
    #[serde(rename = "sign2text")]
    Sign2Text,
    #[serde(rename = "sign2gloss+text")]
    Sign2GlossText,
    #[serde(rename = "gloss2text")]
    Gloss2Text,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Sign2Gloss,
        Protocol::Sign2Text,
        Protocol::Sign2GlossText,
        Protocol::Gloss2Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Sign2Gloss => "sign2gloss",
            Protocol::Sign2Text => "sign2text",
            Protocol::Sign2GlossText => "sign2gloss+text",
            Protocol::Gloss2Text => "gloss2text",
        }
    }

    /// Frame features as input (as opposed to gloss tokens).
    pub fn uses_features(self) -> bool {
        self != Protocol::Gloss2Text
    }

    pub fn recognizes(self) -> bool {
        matches!(self, Protocol::Sign2Gloss | Protocol::Sign2GlossText)
    }

    pub fn translates(self) -> bool {
        self != Protocol::Sign2Gloss
    }

    /// Checks that exactly the objectives of this protocol carry weight.
    /// Single-task protocols need exactly their own weight; the joint
    /// protocol accepts any pair that is not all zero.
    pub fn check_weights(self, w: &LossWeights) -> Result<()> {
        let r = w.recognition > 0.0;
        let t = w.translation > 0.0;
        let fits = match self {
            Protocol::Sign2GlossText => r || t,
            _ => r == self.recognizes() && t == self.translates(),
        };
        if !fits {
            return Err(Error::Config(format!(
                "loss.lambda_r = {} and loss.lambda_t = {} do not fit protocol {self}: recognition weight must be {} and translation weight must be {}",
                w.recognition,
                w.translation,
                if self.recognizes() { "positive" } else { "zero" },
                if self.translates() { "positive" } else { "zero" },
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 3,
            d_ff: 2048,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> StackDims {
        StackDims {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()
            .validate()
            .map_err(|e| Error::Config(format!("model: {}", inner(&e))))?;
        if self.d_ff == 0 {
            return Err(Error::Config("model.d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

fn inner(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_r: f64,
    pub lambda_t: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_r: 5.0,
            lambda_t: 1.0,
            mode: LossMode::LogDomain,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_r, self.lambda_t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub eval_every: usize,
    pub max_iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-8,
            weight_decay: 1e-3,
            batch_size: 32,
            patience: 8,
            factor: 0.7,
            min_lr: 1e-6,
            eval_every: 100,
            max_iterations: 100_000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("optim.{m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err(format!("beta1/beta2 must lie in [0, 1), got {}/{}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return err("patience must be positive".into());
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return err(format!("factor must lie in (0, 1), got {}", self.factor));
        }
        if !(self.min_lr > 0.0) {
            return err(format!("min_lr must be positive, got {}", self.min_lr));
        }
        if self.eval_every == 0 {
            return err("eval_every must be positive".into());
        }
        if self.max_iterations == 0 {
            return err("max_iterations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSweepConfig {
    /// Translation beam widths to try on dev (0 is greedy).
    pub beam_widths: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Prefix beam width for CTC gloss decoding at evaluation time.
    pub ctc_beam_width: usize,
    /// Upper bound on generated sentence length.
    pub max_len: usize,
}

impl Default for DecodeSweepConfig {
    fn default() -> Self {
        Self {
            beam_widths: (0..=10).collect(),
            alphas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            ctc_beam_width: 10,
            max_len: 60,
        }
    }
}

impl DecodeSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_widths.is_empty() || self.alphas.is_empty() {
            return Err(Error::Config("decode.beam_widths and decode.alphas must be non-empty".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=2.0).contains(*a)) {
            return Err(Error::Config(format!("decode.alphas must lie in [0, 2], got {a}")));
        }
        if self.ctc_beam_width == 0 {
            return Err(Error::Config("decode.ctc_beam_width must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode.max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub seed: u64,
    /// Directory holding `train.jsonl`, `dev.jsonl`, `test.jsonl`.
    pub corpus: PathBuf,
    /// Where checkpoints and the training log go.
    pub output: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub decode: DecodeSweepConfig,
}

impl RunConfig {
    pub fn new(protocol: Protocol, corpus: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let loss = LossConfig {
            lambda_r: if protocol.recognizes() { 5.0 } else { 0.0 },
            lambda_t: if protocol.translates() { 1.0 } else { 0.0 },
            mode: LossMode::LogDomain,
        };
        Self {
            protocol,
            seed: 0,
            corpus: corpus.into(),
            output: output.into(),
            model: ModelConfig::default(),
            loss,
            optim: OptimConfig::default(),
            decode: DecodeSweepConfig::default(),
        }
    }

    /// Parses TOML text, applying `key=value` overrides first. Keys use dots
    /// for sections (`optim.lr`); values are TOML literals, falling back to
    /// plain strings.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        for (key, value) in overrides {
            set_key(&mut table, key, value)?;
        }
        default_weights(&mut table)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> Result<LossWeights> {
        self.loss
            .weights()
            .map_err(|e| Error::Config(format!("loss: {}", inner(&e))))
    }

    /// Field-level checks that need no file system access.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.decode.validate()?;
        self.protocol.check_weights(&self.weights()?)
    }

    /// Checks that the corpus holds the training and dev manifests.
    pub fn check_paths(&self) -> Result<()> {
        for name in ["train.jsonl", "dev.jsonl"] {
            if !self.corpus.join(name).is_file() {
                return Err(Error::Config(format!("corpus: {} has no {name}", self.corpus.display())));
            }
        }
        Ok(())
    }
}

/// Loss weights left out of the file follow the protocol: 5 for recognition
/// and 1 for translation when the protocol has that task, 0 otherwise.
fn default_weights(table: &mut toml::Table) -> Result<()> {
    let Some(protocol) = table.get("protocol").and_then(toml::Value::as_str) else {
        return Ok(());
    };
    let protocol: Protocol = protocol.parse()?;
    let loss = table
        .entry("loss")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Config("loss is not a section".into()))?;
    let defaults = RunConfig::new(protocol, "", "").loss;
    loss.entry("lambda_r").or_insert(toml::Value::Float(defaults.lambda_r));
    loss.entry("lambda_t").or_insert(toml::Value::Float(defaults.lambda_t));
    Ok(())
}

fn set_key(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    cursor.insert(last.to_owned(), parsed);
    Ok(())
}
