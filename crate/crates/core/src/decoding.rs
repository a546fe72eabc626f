//! Gloss decoding from CTC frame posteriors and autoregressive sentence
//! decoding (greedy and length-normalized beam search).
//!
//! All decoders are deterministic; equal scores are resolved towards the
//! lowest token index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::losses::BLANK;
use crate::numerics::{log_sum_exp, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending with `<eos>` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing `<eos>`.
    pub fn words(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 0 means greedy decoding.
    pub beam_width: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 0,
            alpha: 0.0,
            max_len: 60,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapses a frame-level path: merge consecutive repeats, drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Best-path decoding: per-frame argmax, then collapse.
pub fn ctc_greedy(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    collapse_path(&path)
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: Self = Self {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_sum_exp(&[self.blank, self.non_blank])
    }
}

fn accumulate(slot: &mut f64, value: f64) {
    *slot = log_sum_exp(&[*slot, value]);
}

/// Prefix beam search over collapsed label sequences. Paths collapsing to the
/// same prefix are merged; the most probable surviving prefix is returned.
pub fn ctc_beam_search(log_probs: &Tensor, width: usize) -> Vec<usize> {
    ctc_beam_search_scored(log_probs, width)
        .into_iter()
        .next()
        .map(|(prefix, _)| prefix)
        .unwrap_or_default()
}

/// All surviving prefixes with their log-probabilities, best first.
pub fn ctc_beam_search_scored(log_probs: &Tensor, width: usize) -> Vec<(Vec<usize>, f64)> {
    let width = width.max(1);
    let classes = log_probs.cols();
    let mut beam: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beam {
            let total = score.total();
            let stay = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            accumulate(&mut stay.blank, total + row[BLANK]);
            if let Some(&last) = prefix.last() {
                accumulate(&mut stay.non_blank, score.non_blank + row[last]);
            }
            for c in (0..classes).filter(|&c| c != BLANK) {
                let mut extended = prefix.clone();
                extended.push(c);
                let from = if prefix.last() == Some(&c) {
                    score.blank
                } else {
                    total
                };
                let slot = next.entry(extended).or_insert(PrefixScore::EMPTY);
                accumulate(&mut slot.non_blank, from + row[c]);
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(width);
        beam = ranked;
    }
    beam.into_iter().map(|(p, s)| (p, s.total())).collect()
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Supplies next-token log-probabilities for a batch of prefixes. Prefixes
/// exclude `<bos>`, which the scorer supplies itself.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Emits the most probable token until `<eos>` or `max_len` tokens.
pub fn ar_greedy<S: StepScorer + ?Sized>(scorer: &mut S, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let dist = scorer.next_log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let best = argmax(&dist);
        log_prob += dist[best];
        tokens.push(best);
        if best == eos {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

/// Greedy decoding of several independent sources at once; `scorer` receives
/// one prefix per source every step, unfinished or not.
pub fn ar_greedy_batch<S: StepScorer + ?Sized>(
    scorer: &mut S,
    batch: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let mut hyps = vec![
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        };
        batch
    ];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let prefixes: Vec<Vec<usize>> = hyps.iter().map(|h| h.tokens.clone()).collect();
        let dists = scorer.next_log_probs(&prefixes)?;
        for (h, dist) in hyps.iter_mut().zip(dists) {
            if h.finished {
                continue;
            }
            let best = argmax(&dist);
            h.log_prob += dist[best];
            h.tokens.push(best);
            h.finished = best == eos;
        }
    }
    Ok(hyps)
}

fn normalized(h: &Hypothesis, alpha: f64) -> f64 {
    h.log_prob / length_penalty(h.tokens.len(), alpha)
}

/// Picks the best hypothesis by length-normalized score; earlier entries win
/// ties.
pub fn best_by_score(hyps: &[Hypothesis], alpha: f64) -> Option<&Hypothesis> {
    let mut best: Option<&Hypothesis> = None;
    for h in hyps {
        if best.is_none_or(|b| normalized(h, alpha) > normalized(b, alpha)) {
            best = Some(h);
        }
    }
    best
}

/// Beam search. Each step keeps the `beam_width` best expansions of the live
/// hypotheses; expansions ending in `<eos>` leave the beam as finished. The
/// result maximizes `log_prob / length_penalty(len)` among finished
/// hypotheses, or among the live ones at `max_len` when none finished.
pub fn ar_beam_search<S: StepScorer + ?Sized>(scorer: &mut S, eos: usize, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam_width == 0 {
        return ar_greedy(scorer, eos, cfg.max_len);
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let dists = scorer.next_log_probs(&prefixes)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (rank, (h, dist)) in live.iter().zip(&dists).enumerate() {
            for (token, lp) in dist.iter().enumerate() {
                candidates.push((h.log_prob + lp, rank, token));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_width);
        let mut next = Vec::with_capacity(cfg.beam_width);
        for (score, rank, token) in candidates {
            let mut tokens = live[rank].tokens.clone();
            tokens.push(token);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: token == eos,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    Ok(best_by_score(pool, cfg.alpha).cloned().expect("beam never empties without finishing"))
}
