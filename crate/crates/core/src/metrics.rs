//! Word error rate with an error breakdown, and corpus-level BLEU-1..4.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Edit counts from one optimal alignment, plus rates in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl WerReport {
    fn from_counts(s: usize, d: usize, i: usize, n: usize) -> Self {
        let pct = |x: usize| 100.0 * x as f64 / n as f64;
        Self {
            wer: pct(s + d + i),
            del_rate: pct(d),
            ins_rate: pct(i),
            sub_rate: pct(s),
            substitutions: s,
            deletions: d,
            insertions: i,
            reference_len: n,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "wer={:.2}", self.wer);
        let _ = writeln!(out, "del_rate={:.2}", self.del_rate);
        let _ = writeln!(out, "ins_rate={:.2}", self.ins_rate);
        let _ = writeln!(out, "sub_rate={:.2}", self.sub_rate);
        let _ = writeln!(out, "substitutions={}", self.substitutions);
        let _ = writeln!(out, "deletions={}", self.deletions);
        let _ = writeln!(out, "insertions={}", self.insertions);
        let _ = writeln!(out, "reference_tokens={}", self.reference_len);
        out
    }
}

/// Minimum edit distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let (s, d, i) = align(reference, hypothesis);
    s + d + i
}

/// Returns (substitutions, deletions, insertions) of one optimal alignment.
/// The backtrace prefers the diagonal, then insertion, then deletion.
fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize) {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i][j] = (dp[i - 1][j - 1] + cost)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut subs, mut dels, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + cost {
                subs += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i][j] == dp[i][j - 1] + 1 {
            ins += 1;
            j -= 1;
        } else {
            dels += 1;
            i -= 1;
        }
    }
    (subs, dels, ins)
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::Config("WER needs a non-empty reference".into()));
    }
    let (s, d, i) = align(reference, hypothesis);
    Ok(WerReport::from_counts(s, d, i, reference.len()))
}

/// Corpus WER: edit counts summed over all pairs, divided by the total
/// reference length.
pub fn corpus_wer<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<WerReport> {
    if references.len() != hypotheses.len() {
        return Err(Error::Config(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        let (a, b, c) = align(r, h);
        s += a;
        d += b;
        i += c;
        n += r.len();
    }
    if n == 0 {
        return Err(Error::Config("WER needs a non-empty reference".into()));
    }
    Ok(WerReport::from_counts(s, d, i, n))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// BLEU-1..4 on a 0-100 scale.
    pub bleu: [f64; 4],
    pub brevity_penalty: f64,
    /// Clipped n-gram precisions for n = 1..4 (fractions).
    pub precisions: [f64; 4],
    pub hypothesis_len: usize,
    pub reference_len: usize,
}

impl BleuReport {
    pub fn bleu4(&self) -> f64 {
        self.bleu[3]
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (n, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(out, "bleu{}={:.2}", n + 1, b);
        }
        for (n, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(out, "precision{}={:.4}", n + 1, p);
        }
        let _ = writeln!(out, "brevity_penalty={:.4}", self.brevity_penalty);
        let _ = writeln!(out, "hypothesis_tokens={}", self.hypothesis_len);
        let _ = writeln!(out, "reference_tokens={}", self.reference_len);
        out
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with one reference per hypothesis and no smoothing.
pub fn bleu<T: Eq + Hash>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<BleuReport> {
    if references.len() != hypotheses.len() {
        return Err(Error::Config(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (reference, hypothesis) in references.iter().zip(hypotheses) {
        c += hypothesis.len();
        r += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hypothesis, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = [0.0; 4];
    for n in 1..=4 {
        if precisions[..n].iter().all(|&p| p > 0.0) {
            let mean_log = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            scores[n - 1] = 100.0 * brevity_penalty * mean_log.exp();
        }
    }
    Ok(BleuReport {
        bleu: scores,
        brevity_penalty,
        precisions,
        hypothesis_len: c,
        reference_len: r,
    })
}
