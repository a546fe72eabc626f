//! Corpus-level decoding and scoring, the decoding-parameter sweep, and the
//! two-stage recognize-then-translate pipeline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{DecodeSweepConfig, Protocol};
use crate::data::{make_batch, Sample};
use crate::decoding::DecodeConfig;
use crate::metrics::{bleu, corpus_wer, BleuReport, WerReport};
use crate::model::{max_output_len, non_empty_glosses, SignTransformer};
use crate::training::DevScore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Prefix beam width for gloss decoding; 0 or 1 is best path.
    pub ctc_beam_width: usize,
    /// Translation decoding; `max_len` is the global cap.
    pub decode: DecodeConfig,
    pub batch_size: usize,
}

impl EvalOptions {
    /// Best-path glosses and greedy sentences, as used during training.
    pub fn greedy(max_len: usize) -> Self {
        Self {
            ctc_beam_width: 0,
            decode: DecodeConfig {
                beam_width: 0,
                alpha: 0.0,
                max_len,
            },
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub wer: Option<WerReport>,
    pub bleu: Option<BleuReport>,
    pub glosses: Vec<Vec<usize>>,
    pub sentences: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        if let Some(w) = &self.wer {
            out.push_str(&w.to_kv());
        }
        if let Some(b) = &self.bleu {
            out.push_str(&b.to_kv());
        }
        out
    }

    /// Dev score where larger is better. Recognition-tracked runs compare
    /// negated WER first and BLEU-4 (when available) second; other runs
    /// compare BLEU-4.
    pub fn tracked(&self, track_wer: bool) -> DevScore {
        let bleu4 = self.bleu.as_ref().map_or(0.0, BleuReport::bleu4);
        match (track_wer, self.wer) {
            (true, Some(w)) => DevScore {
                primary: -w.wer,
                tie_break: bleu4,
            },
            _ => DevScore::from(bleu4),
        }
    }
}

fn source_estimate(protocol: Protocol, sample: &Sample, recognized: Option<&Vec<usize>>) -> usize {
    match (protocol, recognized) {
        (_, Some(g)) if protocol.recognizes() => g.len(),
        (Protocol::Gloss2Text, _) => sample.glosses.len(),
        _ => sample.frames(),
    }
}

pub fn evaluate(model: &SignTransformer, samples: &[Sample], opts: &EvalOptions) -> Result<Evaluation> {
    let protocol = model.protocol;
    let mut glosses = Vec::with_capacity(samples.len());
    let mut sentences = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let recognized = if protocol.recognizes() {
            Some(model.recognize(&batch, opts.ctc_beam_width)?)
        } else {
            None
        };
        if protocol.translates() {
            let caps: Vec<usize> = chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let est = source_estimate(protocol, s, recognized.as_ref().map(|r| &r[i]));
                    max_output_len(est, opts.decode.max_len)
                })
                .collect();
            for h in model.translate(&batch, &opts.decode, &caps)? {
                sentences.push(h.words().to_vec());
            }
        }
        if let Some(r) = recognized {
            glosses.extend(r);
        }
    }
    score(model.protocol, samples, glosses, sentences)
}

fn score(protocol: Protocol, samples: &[Sample], glosses: Vec<Vec<usize>>, sentences: Vec<Vec<usize>>) -> Result<Evaluation> {
    let wer = if protocol.recognizes() {
        let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.glosses.clone()).collect();
        Some(corpus_wer(&refs, &glosses)?)
    } else {
        None
    };
    let bleu = if protocol.translates() {
        let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.sentence.clone()).collect();
        Some(bleu(&refs, &sentences)?)
    } else {
        None
    };
    Ok(Evaluation {
        wer,
        bleu,
        glosses,
        sentences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub beam_width: usize,
    pub alpha: f64,
    pub dev_bleu4: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub best: SweepEntry,
    pub test: Evaluation,
}

impl SweepReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "sweep.beam{}.alpha{:.1}.dev_bleu4={:.2}", e.beam_width, e.alpha, e.dev_bleu4);
        }
        let _ = writeln!(out, "best_beam_width={}", self.best.beam_width);
        let _ = writeln!(out, "best_alpha={:.1}", self.best.alpha);
        let _ = writeln!(out, "best_dev_bleu4={:.2}", self.best.dev_bleu4);
        for line in self.test.to_kv().lines() {
            let _ = writeln!(out, "test.{line}");
        }
        out
    }
}

/// Scores every (width, alpha) pair on `dev` in grid order, keeps the first
/// pair with the highest BLEU-4 and evaluates `test` with it.
pub fn sweep(model: &SignTransformer, dev: &[Sample], test: &[Sample], grid: &DecodeSweepConfig) -> Result<SweepReport> {
    if !model.protocol.translates() {
        return Err(Error::Compatibility(format!(
            "decoding sweep needs a translating protocol, checkpoint is {}",
            model.protocol
        )));
    }
    let options = |beam_width: usize, alpha: f64| EvalOptions {
        ctc_beam_width: grid.ctc_beam_width,
        decode: DecodeConfig {
            beam_width,
            alpha,
            max_len: grid.max_len,
        },
        batch_size: 32,
    };
    let mut entries: Vec<SweepEntry> = Vec::new();
    for &beam_width in &grid.beam_widths {
        for &alpha in &grid.alphas {
            // Widths 0 and 1 keep a single hypothesis, so alpha cannot matter.
            let reuse = entries.iter().find(|e| e.beam_width == beam_width && beam_width <= 1).copied();
            let dev_bleu4 = match reuse {
                Some(e) => e.dev_bleu4,
                None => evaluate(model, dev, &options(beam_width, alpha))?
                    .bleu
                    .map_or(0.0, |b| b.bleu4()),
            };
            entries.push(SweepEntry {
                beam_width,
                alpha,
                dev_bleu4,
            });
        }
    }
    let mut best = entries[0];
    for e in &entries[1..] {
        if e.dev_bleu4 > best.dev_bleu4 {
            best = *e;
        }
    }
    let test = evaluate(model, test, &options(best.beam_width, best.alpha))?;
    Ok(SweepReport { entries, best, test })
}

/// Recognizes glosses with one model and translates them with a gloss-to-text
/// model. With `oracle_glosses` the reference glosses go straight to stage 2.
pub fn pipeline(
    recognizer: &SignTransformer,
    translator: &SignTransformer,
    samples: &[Sample],
    opts: &EvalOptions,
    oracle_glosses: bool,
) -> Result<Evaluation> {
    if translator.protocol != Protocol::Gloss2Text {
        return Err(Error::Compatibility(format!(
            "pipeline translator must be a gloss2text checkpoint, got {}",
            translator.protocol
        )));
    }
    if !oracle_glosses && !recognizer.protocol.recognizes() {
        return Err(Error::Compatibility(format!(
            "pipeline recognizer must be trained for recognition, got {}",
            recognizer.protocol
        )));
    }
    if recognizer.vocabs.gloss != translator.vocabs.gloss {
        return Err(Error::Compatibility("recognizer and translator use different gloss vocabularies".into()));
    }
    let recognized: Vec<Vec<usize>> = if oracle_glosses {
        samples.iter().map(|s| s.glosses.clone()).collect()
    } else {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(opts.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            out.extend(recognizer.recognize(&make_batch(&refs)?, opts.ctc_beam_width)?);
        }
        out
    };
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.glosses.clone()).collect();
    let wer = corpus_wer(&refs, &recognized)?;

    let stage2: Vec<Sample> = samples
        .iter()
        .zip(&recognized)
        .map(|(s, g)| Sample {
            glosses: non_empty_glosses(g.clone()),
            ..s.clone()
        })
        .collect();
    let translated = evaluate(translator, &stage2, opts)?;
    Ok(Evaluation {
        wer: Some(wer),
        bleu: translated.bleu,
        glosses: recognized,
        sentences: translated.sentences,
    })
}
