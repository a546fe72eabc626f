//! CTC recognition loss, word-level translation loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::numerics::{log_sum_exp, Backward, Graph, Tensor, TensorError, Var};
use crate::{Error, Result};

pub const BLANK: usize = 0;

/// Gloss target together with its blank-interleaved form
/// `blank g1 blank g2 ... gN blank`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    glosses: Vec<usize>,
    extended: Vec<usize>,
}

impl CtcTarget {
    pub fn new(glosses: Vec<usize>) -> Result<Self> {
        if glosses.contains(&BLANK) {
            return Err(Error::Vocabulary("gloss target contains the blank symbol".into()));
        }
        let mut extended = Vec::with_capacity(2 * glosses.len() + 1);
        extended.push(BLANK);
        for &g in &glosses {
            extended.push(g);
            extended.push(BLANK);
        }
        Ok(Self { glosses, extended })
    }

    pub fn glosses(&self) -> &[usize] {
        &self.glosses
    }

    pub fn extended(&self) -> &[usize] {
        &self.extended
    }

    /// Fewest frames that can emit this target: one per gloss plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.glosses.windows(2).filter(|w| w[0] == w[1]).count();
        self.glosses.len() + repeats
    }

    pub fn is_feasible(&self, frames: usize) -> bool {
        frames >= self.min_frames().max(1)
    }
}

/// Forward variables `alpha[t][s]` (log-probability of all path prefixes
/// ending in extended state `s` at frame `t`, emission at `t` included).
fn ctc_alpha(lp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = lp.at(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut terms = [alpha[t - 1][s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s >= 1 {
                terms[1] = alpha[t - 1][s - 1];
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                terms[2] = alpha[t - 1][s - 2];
            }
            let acc = log_sum_exp(&terms);
            if acc > f64::NEG_INFINITY {
                alpha[t][s] = acc + lp.at(t, ext[s]);
            }
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: log-probability of completing the target
/// from state `s` at frame `t`, emission at `t` excluded.
fn ctc_beta(lp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, s_len) = (lp.rows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let step = |next: usize| beta[t + 1][next] + lp.at(t + 1, ext[next]);
            let mut terms = [step(s), f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s + 1 < s_len {
                terms[1] = step(s + 1);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                terms[2] = step(s + 2);
            }
            beta[t][s] = log_sum_exp(&terms);
        }
    }
    beta
}

fn ctc_total(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s_len = last.len();
    if s_len == 1 {
        last[0]
    } else {
        log_sum_exp(&[last[s_len - 1], last[s_len - 2]])
    }
}

/// `log p(G* | V)` summed over every frame path collapsing to the target,
/// without touching a graph.
pub fn ctc_log_prob_value(log_probs: &Tensor, target: &CtcTarget) -> f64 {
    if log_probs.rows() == 0 || !target.is_feasible(log_probs.rows()) {
        return f64::NEG_INFINITY;
    }
    ctc_total(&ctc_alpha(log_probs, target.extended()))
}

struct CtcGrad {
    grad: Vec<f64>,
}

impl Backward for CtcGrad {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|v| v * g[0]).collect())]
    }
}

/// CTC log-likelihood of `target` under frame log-probabilities
/// `log_probs` (`T x classes`). An infeasible target (too few frames) yields
/// negative infinity with a zero gradient.
pub fn ctc_log_prob(g: &mut Graph, log_probs: Var, target: &CtcTarget) -> Result<Var> {
    let lp = g.value(log_probs);
    if lp.shape().len() != 2 {
        return Err(TensorError::Contract(format!(
            "ctc expects T x classes log-probabilities, got {:?}",
            lp.shape()
        ))
        .into());
    }
    if let Some(&bad) = target.glosses().iter().find(|&&c| c >= lp.cols()) {
        return Err(Error::Vocabulary(format!(
            "gloss {bad} outside {} output classes",
            lp.cols()
        )));
    }
    let (frames, classes) = (lp.rows(), lp.cols());
    let mut grad = vec![0.0; frames * classes];
    let total = if target.is_feasible(frames) {
        let ext = target.extended();
        let alpha = ctc_alpha(lp, ext);
        let beta = ctc_beta(lp, ext);
        let total = ctc_total(&alpha);
        for t in 0..frames {
            for (s, &class) in ext.iter().enumerate() {
                let occupancy = alpha[t][s] + beta[t][s] - total;
                if occupancy > f64::NEG_INFINITY {
                    grad[t * classes + class] += occupancy.exp();
                }
            }
        }
        total
    } else {
        f64::NEG_INFINITY
    };
    Ok(g.push(Tensor::scalar(total), vec![log_probs], CtcGrad { grad }))
}

/// How a probability-valued objective is turned into a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `-log p`; the default.
    #[default]
    LogDomain,
    /// `1 - p`.
    Probability,
}

/// Recognition loss from a CTC log-likelihood.
pub fn recognition_loss(g: &mut Graph, log_p: Var, mode: LossMode) -> Var {
    match mode {
        LossMode::LogDomain => g.scale(log_p, -1.0),
        LossMode::Probability => {
            let p = g.exp(log_p);
            let neg = g.scale(p, -1.0);
            g.add_scalar(neg, 1.0)
        }
    }
}

pub fn recognition_loss_value(log_p: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::LogDomain => -log_p,
        LossMode::Probability => 1.0 - log_p.exp(),
    }
}

/// Translation loss of one sentence: `word_logits` has one row per reference
/// token (the last being `<eos>`).
pub fn translation_loss(g: &mut Graph, word_logits: Var, reference: &[usize], mode: LossMode) -> Result<Var> {
    let rows = g.value(word_logits).rows();
    if rows != reference.len() {
        return Err(TensorError::Shape {
            op: "translation_loss",
            left: g.value(word_logits).shape().to_vec(),
            right: vec![reference.len()],
        }
        .into());
    }
    let lp = g.log_softmax(word_logits);
    let picked = g.pick(lp, reference)?;
    let log_p = g.sum(picked);
    Ok(recognition_loss(g, log_p, mode))
}

/// Batched translation loss over right-padded targets.
///
/// Log-domain: summed token cross-entropy divided by the number of real
/// tokens. Probability: mean over sentences of `1 - prod q_u`.
pub fn masked_translation_loss(
    g: &mut Graph,
    word_logits: Var,
    targets: &[usize],
    mask: &[bool],
    max_len: usize,
    mode: LossMode,
) -> Result<Var> {
    let lp = g.log_softmax(word_logits);
    let picked = g.pick(lp, targets)?;
    if mask.len() != targets.len() || max_len == 0 || targets.len() % max_len != 0 {
        return Err(TensorError::Shape {
            op: "masked_translation_loss",
            left: vec![targets.len()],
            right: vec![mask.len(), max_len],
        }
        .into());
    }
    match mode {
        LossMode::LogDomain => {
            let tokens = mask.iter().filter(|&&m| m).count().max(1) as f64;
            let weights = mask.iter().map(|&m| if m { -1.0 / tokens } else { 0.0 }).collect();
            Ok(g.weighted_sum(picked, weights)?)
        }
        LossMode::Probability => {
            let batch = targets.len() / max_len;
            let mut total: Option<Var> = None;
            for b in 0..batch {
                let weights = (0..targets.len())
                    .map(|i| if i / max_len == b && mask[i] { 1.0 } else { 0.0 })
                    .collect();
                let log_p = g.weighted_sum(picked, weights)?;
                let loss = recognition_loss(g, log_p, LossMode::Probability);
                let loss = g.scale(loss, 1.0 / batch as f64);
                total = Some(match total {
                    Some(t) => g.add(t, loss)?,
                    None => loss,
                });
            }
            Ok(total.expect("non-empty batch"))
        }
    }
}

/// Relative importance of recognition and translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recognition: f64,
    pub translation: f64,
}

impl LossWeights {
    pub fn new(recognition: f64, translation: f64) -> Result<Self> {
        let valid = |w: f64| w.is_finite() && w >= 0.0;
        if !valid(recognition) || !valid(translation) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {recognition} and {translation}"
            )));
        }
        if recognition == 0.0 && translation == 0.0 {
            return Err(Error::Config(
                "recognition and translation weights cannot both be zero".into(),
            ));
        }
        Ok(Self {
            recognition,
            translation,
        })
    }
}

/// `recognition_weight * L_R + translation_weight * L_T`; absent terms count
/// as zero.
pub fn joint_loss(g: &mut Graph, recognition: Option<Var>, translation: Option<Var>, w: LossWeights) -> Result<Var> {
    let r = recognition.map(|l| g.scale(l, w.recognition));
    let t = translation.map(|l| g.scale(l, w.translation));
    match (r, t) {
        (Some(r), Some(t)) => Ok(g.add(r, t)?),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(Error::Config("joint loss without any active term".into())),
    }
}

pub fn joint_loss_value(recognition: f64, translation: f64, w: LossWeights) -> f64 {
    w.recognition * recognition + w.translation * translation
}
