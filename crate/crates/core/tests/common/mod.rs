//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slt::decoding::{length_penalty, StepScorer};
use slt::numerics::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Rows that are valid probability distributions, returned in log space.
pub fn random_log_probs(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| (v / total).ln()));
    }
    Tensor::matrix(rows, cols, data)
}

/// Central finite differences (step `h`) against reverse mode. `build` maps
/// the input leaves to a scalar. Returns the worst norm-wise relative error
/// `|a - n| / max(|a|, |n|)` over all inputs; inputs whose gradients are both
/// below 1e-9 in norm count as exact.
pub fn gradient_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let h = 1e-6;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        if scale < 1e-9 {
            continue;
        }
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

/// Sums `w * x` with fixed pseudo-random weights so that every output entry
/// influences the scalar.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0xABCD);
    let n = g.value(x).numel();
    let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    g.weighted_sum(x, w).unwrap()
}

/// Collapse: merge repeats, then drop blanks (index 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != 0 {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Calls `f` on every length-`t` sequence over `0..symbols`.
pub fn for_each_sequence(t: usize, symbols: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0; t];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == t {
                return;
            }
            path[i] += 1;
            if path[i] < symbols {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// log p(target) by enumerating every frame-level path.
pub fn brute_force_ctc(log_probs: &Tensor, target: &[usize]) -> f64 {
    let (t, c) = (log_probs.rows(), log_probs.cols());
    let mut total = 0.0;
    for_each_sequence(t, c, |path| {
        if collapse(path) == target {
            total += path.iter().enumerate().map(|(i, &s)| log_probs.at(i, s)).sum::<f64>().exp();
        }
    });
    total.ln()
}

/// Probability of every collapsed label sequence, by path enumeration.
pub fn collapsed_distribution(log_probs: &Tensor) -> HashMap<Vec<usize>, f64> {
    let (t, c) = (log_probs.rows(), log_probs.cols());
    let mut dist: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_sequence(t, c, |path| {
        let p = path.iter().enumerate().map(|(i, &s)| log_probs.at(i, s)).sum::<f64>().exp();
        *dist.entry(collapse(path)).or_insert(0.0) += p;
    });
    dist
}

/// Plain recursive edit distance with unit costs.
pub fn naive_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_edit_distance(ra, rb) + usize::from(x != y);
            let del = naive_edit_distance(ra, b) + 1;
            let ins = naive_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Same recursion over suffix positions with a memo table.
pub fn memo_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = (go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]))
            .min(go(a, b, i + 1, j, memo) + 1)
            .min(go(a, b, i, j + 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Next-token distributions drawn at random per prefix, fixed by the seed.
pub struct RandomTable {
    pub vocab: usize,
    pub seed: u64,
    /// Sharpness of the random logits.
    pub temperature: f64,
    pub calls: usize,
}

impl RandomTable {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            seed,
            temperature: 2.0,
            calls: 0,
        }
    }

    pub fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        let mut key = self.seed.wrapping_mul(1_000_003);
        for &t in prefix {
            key = key.wrapping_mul(31).wrapping_add(t as u64 + 1);
        }
        key = key.wrapping_mul(7).wrapping_add(prefix.len() as u64);
        let mut r = rng(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| self.temperature * r.random_range(-1.0..1.0)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - norm).collect()
    }
}

impl StepScorer for RandomTable {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> slt::Result<Vec<Vec<f64>>> {
        self.calls += 1;
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

/// Best finished sequence (ending in `eos`, at most `max_len` tokens) by
/// `log_prob / length_penalty(len, alpha)`, enumerating every sequence.
pub fn exhaustive_best(
    scorer: &mut dyn StepScorer,
    eos: usize,
    max_len: usize,
    alpha: f64,
) -> (Vec<usize>, f64, usize) {
    let vocab = scorer.vocab_size();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut enumerated = 0;
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (prefix, lp) in &frontier {
            let dist = scorer.next_log_probs(std::slice::from_ref(prefix)).unwrap().remove(0);
            for (tok, l) in dist.iter().enumerate().take(vocab) {
                let mut seq = prefix.clone();
                seq.push(tok);
                let score = lp + l;
                if tok == eos {
                    enumerated += 1;
                    let norm = score / length_penalty(seq.len(), alpha);
                    if best.as_ref().is_none_or(|(_, b)| norm > *b) {
                        best = Some((seq, norm));
                    }
                } else {
                    next.push((seq, score));
                }
            }
        }
        frontier = next;
    }
    enumerated += frontier.len();
    let (seq, score) = best.expect("some sequence finishes");
    (seq, score, enumerated)
}

fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_mask(rng: &mut impl Rng, rows: usize, keys: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(rows * keys);
    for _ in 0..rows {
        let keep = rng.random_range(0..keys);
        mask.extend((0..keys).map(|j| j == keep || rng.random_bool(0.6)));
    }
    mask
}

/// Worst finite-difference error of every differentiable operation and loss
/// over `points` random inputs each.
pub fn gradient_suite(points: usize) -> Vec<(&'static str, f64)> {
    use slt::losses::{ctc_log_prob, masked_translation_loss, recognition_loss, translation_loss, CtcTarget, LossMode};
    use slt::numerics::AttentionLayout;

    type Case = (&'static str, Box<dyn Fn(u64) -> f64>);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[4, 2], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        })),
        ("add", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[2, 3], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                let y = g.mul(y, v[0]).unwrap();
                project(g, y, s)
            })
        })),
        ("add_bias", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[4], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        })),
        ("mul", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 2], -1.0, 1.0), random_tensor(&mut r, &[3, 2], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        })),
        ("mul_const", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 2], -1.0, 1.0)];
            let c = random_tensor(&mut r, &[3, 2], -2.0, 2.0);
            gradient_error(&ins, |g, v| {
                let y = g.mul_const(v[0], c.clone()).unwrap();
                project(g, y, s)
            })
        })),
        ("dropout", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[4, 5], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.dropout(v[0], 0.3, &mut rng(s + 17)).unwrap();
                project(g, y, s)
            })
        })),
        ("scale", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[2, 3], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.scale(v[0], -1.7);
                project(g, y, s)
            })
        })),
        ("add_scalar", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[2, 3], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.add_scalar(v[0], 0.3);
                let y = g.mul(y, y).unwrap();
                project(g, y, s)
            })
        })),
        ("relu", Box::new(|s| {
            let mut r = rng(s);
            let ins = [away_from_zero(&mut r, &[3, 4])];
            gradient_error(&ins, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, s)
            })
        })),
        ("exp", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 3], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let y = g.exp(v[0]);
                project(g, y, s)
            })
        })),
        ("ln", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 3], 0.5, 2.0)];
            gradient_error(&ins, |g, v| {
                let y = g.ln(v[0]);
                project(g, y, s)
            })
        })),
        ("sum", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 3], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.mul(v[0], v[0]).unwrap();
                g.sum(y)
            })
        })),
        ("weighted_sum", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[4], -1.0, 1.0)];
            gradient_error(&ins, |g, v| {
                let y = g.exp(v[0]);
                g.weighted_sum(y, vec![0.5, -1.0, 2.0, 0.0]).unwrap()
            })
        })),
        ("gather_rows", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[5, 3], -1.0, 1.0)];
            let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
            gradient_error(&ins, |g, v| {
                let y = g.gather_rows(v[0], &idx).unwrap();
                project(g, y, s)
            })
        })),
        ("slice_rows", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[6, 3], -1.0, 1.0)];
            let start = r.random_range(0..4);
            gradient_error(&ins, |g, v| {
                let y = g.slice_rows(v[0], start, 2).unwrap();
                project(g, y, s)
            })
        })),
        ("pick", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[4, 5], -1.0, 1.0)];
            let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            gradient_error(&ins, |g, v| {
                let y = g.exp(v[0]);
                let y = g.pick(y, &idx).unwrap();
                project(g, y, s)
            })
        })),
        ("softmax_rows", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 5], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let y = g.softmax(v[0], 1).unwrap();
                project(g, y, s)
            })
        })),
        ("softmax_columns", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[4, 3], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let y = g.softmax(v[0], 0).unwrap();
                project(g, y, s)
            })
        })),
        ("log_softmax", Box::new(|s| {
            let mut r = rng(s);
            let ins = [random_tensor(&mut r, &[3, 5], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let y = g.log_softmax(v[0]);
                project(g, y, s)
            })
        })),
        ("layer_norm", Box::new(|s| {
            let mut r = rng(s);
            let ins = [
                random_tensor(&mut r, &[3, 6], -2.0, 2.0),
                random_tensor(&mut r, &[6], 0.5, 1.5),
                random_tensor(&mut r, &[6], -0.5, 0.5),
            ];
            gradient_error(&ins, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                project(g, y, s)
            })
        })),
        ("batch_norm_train", Box::new(|s| {
            let mut r = rng(s);
            let ins = [
                random_tensor(&mut r, &[6, 4], -2.0, 2.0),
                random_tensor(&mut r, &[4], 0.5, 1.5),
                random_tensor(&mut r, &[4], -0.5, 0.5),
            ];
            let mask = vec![true, true, false, true, true, false];
            gradient_error(&ins, |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &mask, 1e-5, None).unwrap();
                project(g, y, s)
            })
        })),
        ("batch_norm_eval", Box::new(|s| {
            let mut r = rng(s);
            let ins = [
                random_tensor(&mut r, &[5, 3], -2.0, 2.0),
                random_tensor(&mut r, &[3], 0.5, 1.5),
                random_tensor(&mut r, &[3], -0.5, 0.5),
            ];
            let mean = random_tensor(&mut r, &[3], -1.0, 1.0);
            let var = random_tensor(&mut r, &[3], 0.5, 2.0);
            gradient_error(&ins, |g, v| {
                let (y, _) = g
                    .batch_norm(v[0], v[1], v[2], &[true; 5], 1e-5, Some((mean.data(), var.data())))
                    .unwrap();
                project(g, y, s)
            })
        })),
        ("attention", Box::new(|s| {
            let mut r = rng(s);
            let layout = AttentionLayout {
                batch: 2,
                queries: 3,
                keys: 4,
                heads: 2,
            };
            let ins = [
                random_tensor(&mut r, &[6, 4], -1.0, 1.0),
                random_tensor(&mut r, &[8, 4], -1.0, 1.0),
                random_tensor(&mut r, &[8, 4], -1.0, 1.0),
            ];
            let mask = random_mask(&mut r, 6, 4);
            let drop: Option<Vec<f64>> = (s % 2 == 0).then(|| {
                (0..2 * 2 * 3 * 4).map(|_| if r.random_bool(0.2) { 0.0 } else { 1.25 }).collect()
            });
            gradient_error(&ins, |g, v| {
                let y = g.attention(v[0], v[1], v[2], layout, &mask, drop.clone()).unwrap();
                project(g, y, s)
            })
        })),
        ("ctc_log_prob", Box::new(|s| {
            let mut r = rng(s);
            let t = r.random_range(3..7);
            let target = CtcTarget::new((0..r.random_range(1..3)).map(|_| r.random_range(1..4)).collect()).unwrap();
            let ins = [random_tensor(&mut r, &[t, 4], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let lp = g.log_softmax(v[0]);
                ctc_log_prob(g, lp, &target).unwrap()
            })
        })),
        ("recognition_loss", Box::new(|s| {
            let mut r = rng(s);
            let t = r.random_range(4..7);
            let target = CtcTarget::new((0..r.random_range(1..4)).map(|_| r.random_range(1..3)).collect()).unwrap();
            let ins = [random_tensor(&mut r, &[t, 3], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                let lp = g.log_softmax(v[0]);
                let log_p = ctc_log_prob(g, lp, &target).unwrap();
                recognition_loss(g, log_p, LossMode::LogDomain)
            })
        })),
        ("translation_loss", Box::new(|s| {
            let mut r = rng(s);
            let u = r.random_range(1..5);
            let reference: Vec<usize> = (0..u).map(|_| r.random_range(0..6)).collect();
            let ins = [random_tensor(&mut r, &[u, 6], -2.0, 2.0)];
            gradient_error(&ins, |g, v| translation_loss(g, v[0], &reference, LossMode::LogDomain).unwrap())
        })),
        ("masked_translation_loss", Box::new(|s| {
            let mut r = rng(s);
            let targets: Vec<usize> = (0..8).map(|_| r.random_range(0..5)).collect();
            let mask = vec![true, true, true, false, true, true, false, false];
            let ins = [random_tensor(&mut r, &[8, 5], -2.0, 2.0)];
            gradient_error(&ins, |g, v| {
                masked_translation_loss(g, v[0], &targets, &mask, 4, LossMode::LogDomain).unwrap()
            })
        })),
    ];
    cases
        .iter()
        .map(|(name, case)| {
            let worst = (0..points as u64).map(|p| case(1000 + p)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

/// Largest |ctc - brute force| over random instances with at most `max_t`
/// frames, `max_g` gloss classes and `max_n` target glosses. Infeasible
/// targets must give -inf on both sides.
pub fn ctc_oracle_error(instances: usize, seed: u64, max_t: usize, max_g: usize, max_n: usize) -> f64 {
    use slt::losses::{ctc_log_prob_value, CtcTarget};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t = r.random_range(1..=max_t);
        let classes = 1 + r.random_range(1..=max_g);
        let n = r.random_range(0..=max_n);
        let target: Vec<usize> = (0..n).map(|_| r.random_range(1..classes)).collect();
        let lp = random_log_probs(&mut r, t, classes);
        let expected = brute_force_ctc(&lp, &target);
        let got = ctc_log_prob_value(&lp, &CtcTarget::new(target).unwrap());
        let err = if expected == f64::NEG_INFINITY || got == f64::NEG_INFINITY {
            if expected == got {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (expected - got).abs()
        };
        worst = worst.max(err);
    }
    worst
}

/// Instances where the prefix beam search (wide enough to keep every prefix)
/// disagrees with the most probable collapsed sequence by enumeration.
pub fn ctc_beam_mismatches(instances: usize, seed: u64, max_t: usize, max_g: usize) -> usize {
    use slt::decoding::ctc_beam_search;
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let t = r.random_range(1..=max_t);
        let classes = 1 + r.random_range(1..=max_g);
        let lp = random_log_probs(&mut r, t, classes);
        let dist = collapsed_distribution(&lp);
        let (best, _) = dist
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty distribution");
        let width = classes.pow(t as u32);
        if &ctc_beam_search(&lp, width) != best {
            bad += 1;
        }
    }
    bad
}

/// Every (non-eos words, max_len) pair whose full sequence space has at most
/// `limit` members.
pub fn toy_decoding_shapes(limit: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for words in 1..=limit {
        for len in 1..=limit {
            let finished: usize = (0..len).map(|k| words.saturating_pow(k as u32)).fold(0, usize::saturating_add);
            if finished.saturating_add(words.saturating_pow(len as u32)) <= limit {
                shapes.push((words, len));
            }
        }
    }
    shapes
}

pub struct BeamComparison {
    pub instances: usize,
    pub mismatches: usize,
}

/// Compares beam search of `width` (None: wide enough to keep every prefix)
/// with exhaustive search on random tables of every toy shape.
pub fn beam_vs_exhaustive(seeds: u64, width: Option<usize>) -> BeamComparison {
    use slt::decoding::{ar_beam_search, DecodeConfig};
    let mut out = BeamComparison {
        instances: 0,
        mismatches: 0,
    };
    for (words, len) in toy_decoding_shapes(27) {
        for seed in 0..seeds {
            for alpha in [0.0, 0.5, 1.0, 2.0] {
                let eos = 0;
                let mut table = RandomTable::new(words + 1, seed * 131 + words as u64 * 7 + len as u64);
                let (expected, score, _) = exhaustive_best(&mut table, eos, len, alpha);
                let cfg = DecodeConfig {
                    beam_width: width.unwrap_or((words + 1).pow(len as u32)),
                    alpha,
                    max_len: len,
                };
                let got = ar_beam_search(&mut table, eos, &cfg).unwrap();
                let got_score = got.log_prob / length_penalty(got.tokens.len(), alpha);
                out.instances += 1;
                if got.tokens != expected || (got_score - score).abs() > 1e-12 {
                    out.mismatches += 1;
                }
            }
        }
    }
    out
}

/// Pairs (all sequences up to `max_len` over `symbols` symbols) where the
/// metric disagrees with the memoized recursion, or whose edit counts do not
/// reconcile the two lengths.
pub fn edit_distance_mismatches(max_len: usize, symbols: usize, naive_up_to: usize) -> (usize, usize) {
    use slt::metrics::wer;
    let mut all: Vec<Vec<usize>> = Vec::new();
    for len in 0..=max_len {
        for_each_sequence(len, symbols, |s| all.push(s.to_vec()));
    }
    let (mut checked, mut bad) = (0, 0);
    for a in all.iter().filter(|a| !a.is_empty()) {
        for b in &all {
            checked += 1;
            let d = slt::metrics::edit_distance(a, b);
            let expected = if a.len() <= naive_up_to && b.len() <= naive_up_to {
                naive_edit_distance(a, b)
            } else {
                memo_edit_distance(a, b)
            };
            let report = wer(a, b).unwrap();
            let counts_ok = report.substitutions + report.deletions + report.insertions == d
                && a.len() - report.deletions == b.len() - report.insertions;
            if d != expected || !counts_ok {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

/// (label, computed, expected) for hand-worked BLEU cases.
pub fn bleu_fixtures() -> Vec<(&'static str, f64, f64)> {
    use slt::metrics::bleu;
    let t = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    let mut out = Vec::new();

    // Four of six reference words, all n-grams matching: BP = exp(1 - 6/4).
    let r = bleu(&[t("the cat is on the mat")], &[t("the cat is on")]).unwrap();
    out.push(("brevity-only bleu4", r.bleu4(), 60.65));
    out.push(("brevity-only bp", 100.0 * r.brevity_penalty, 60.65));

    let r = bleu(&[t("the cat is on the mat")], &[t("the cat is on the mat")]).unwrap();
    out.push(("identical bleu4", r.bleu4(), 100.0));

    // Clipped unigrams: "the" appears twice in the reference, so 2 of 4 count.
    let r = bleu(&[t("the cat is on the mat")], &[t("the the the the")]).unwrap();
    out.push(("clipped bleu1", r.bleu[0], 50.0 * (-0.5f64).exp()));
    out.push(("clipped bleu4", r.bleu4(), 0.0));

    // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0/3; equal lengths.
    let r = bleu(&[t("the cat is on the mat")], &[t("the cat sat on the mat")]).unwrap();
    out.push(("one substitution bleu1", r.bleu[0], 100.0 * 5.0 / 6.0));
    out.push(("one substitution bleu2", r.bleu[1], 100.0 * (5.0f64 / 6.0 * 3.0 / 5.0).sqrt()));
    out.push(("one substitution bleu3", r.bleu[2], 100.0 * (5.0f64 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0).cbrt()));
    out.push(("one substitution bleu4", r.bleu4(), 0.0));

    // Corpus pooling: counts add up over sentences before dividing.
    let r = bleu(
        &[t("w x y z"), t("a b c d e")],
        &[t("w x y z"), t("a b q d e")],
    )
    .unwrap();
    let (p1, p2, p3, p4): (f64, f64, f64, f64) = (8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0, 1.0 / 3.0);
    out.push(("pooled bleu4", r.bleu4(), 100.0 * (p1 * p2 * p3 * p4).powf(0.25)));
    out
}

pub fn toy_vocabs(glosses: usize, words: usize) -> slt::data::Vocabularies {
    use slt::data::{Vocabularies, Vocabulary};
    let g: Vec<String> = (0..glosses).map(|i| format!("G{i}")).collect();
    let w: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    Vocabularies {
        gloss: Vocabulary::gloss(g.iter().map(String::as_str)),
        text: Vocabulary::text(w.iter().map(String::as_str)),
    }
}

/// Random samples over `toy_vocabs` indices; the first gloss index is 3 and
/// the first word index is 4.
pub fn random_samples(r: &mut impl Rng, n: usize, d_in: usize, glosses: usize, words: usize) -> Vec<slt::data::Sample> {
    use slt::embeddings::FeatureSequence;
    (0..n)
        .map(|i| {
            let g: Vec<usize> = (0..r.random_range(1..4)).map(|_| 3 + r.random_range(0..glosses)).collect();
            let frames = r.random_range(2 * g.len() + 1..2 * g.len() + 5);
            let sentence: Vec<usize> = (0..r.random_range(1..5)).map(|_| 4 + r.random_range(0..words)).collect();
            slt::data::Sample {
                id: format!("r{i}"),
                features: FeatureSequence::new(random_tensor(r, &[frames, d_in], -1.0, 1.0)).unwrap(),
                glosses: g,
                sentence,
            }
        })
        .collect()
}

pub fn random_model(r: &mut impl Rng, protocol: slt::config::Protocol, dropout: f64) -> slt::model::SignTransformer {
    use slt::config::ModelConfig;
    let heads = [1, 2, 4][r.random_range(0..3)];
    let cfg = ModelConfig {
        d_model: heads * 2 * r.random_range(1..3),
        heads,
        layers: r.random_range(1..3),
        d_ff: r.random_range(2..9),
        dropout,
    };
    slt::model::SignTransformer::new(cfg, protocol, 3, toy_vocabs(4, 5), r.random()).unwrap()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Counts configurations where (a) some decoder logit at step u changes when
/// inputs after u are replaced, or (b) some encoder output at a real position
/// changes when padded content is replaced.
pub fn masking_violations(configs: u64) -> (usize, usize) {
    use slt::config::Protocol;
    use slt::data::make_batch;
    let (mut causal_bad, mut padding_bad) = (0, 0);
    for c in 0..configs {
        let mut r = rng(5000 + c);
        let protocol = if c % 4 == 3 { Protocol::Gloss2Text } else { Protocol::Sign2GlossText };
        let model = random_model(&mut r, protocol, 0.0);
        let samples = random_samples(&mut r, 3, 3, 4, 5);
        let batch = make_batch(&samples.iter().collect::<Vec<_>>()).unwrap();

        // (a) causality
        let logits = |inputs: &[usize]| {
            let mut f = model.eval_forward();
            let enc = model.encode(&mut f, &batch).unwrap();
            let l = model.decode_logits(&mut f, enc.z, &enc.src, inputs, &batch.target).unwrap();
            f.graph.value(l).clone()
        };
        let base = logits(&batch.text_input);
        let max_len = batch.target.max_len;
        let b = r.random_range(0..batch.len());
        let u = r.random_range(0..max_len);
        let mut perturbed = batch.text_input.clone();
        for slot in perturbed[b * max_len + u + 1..(b + 1) * max_len].iter_mut() {
            *slot = r.random_range(0..9);
        }
        let moved = logits(&perturbed);
        let cols = base.cols();
        let keep = |t: &slt::numerics::Tensor| {
            (0..batch.len())
                .flat_map(|s| {
                    let upto = if s == b { u + 1 } else { max_len };
                    t.data()[s * max_len * cols..(s * max_len + upto) * cols].to_vec()
                })
                .collect::<Vec<f64>>()
        };
        if !same_bits(&keep(&base), &keep(&moved)) {
            causal_bad += 1;
        }

        // (b) padding isolation, in eval and in dropout-free training mode
        let mut noisy = batch.clone();
        let src = &batch.source;
        if protocol.uses_features() {
            let d = batch.features.cols();
            let data = noisy.features.data_mut();
            for (s, &len) in src.lengths.iter().enumerate() {
                for t in len..src.max_len {
                    for k in 0..d {
                        data[(s * src.max_len + t) * d + k] = r.random_range(-50.0..50.0);
                    }
                }
            }
        } else {
            let layout = batch.gloss_layout.clone().unwrap();
            for (s, &len) in layout.lengths.iter().enumerate() {
                for t in len..layout.max_len {
                    noisy.gloss_tokens[s * layout.max_len + t] = r.random_range(0..7);
                }
            }
        }
        for train in [false, true] {
            let encode = |batch: &slt::data::Batch| {
                let mut f = if train { model.train_forward(1) } else { model.eval_forward() };
                let enc = model.encode(&mut f, batch).unwrap();
                let z = f.graph.value(enc.z).clone();
                let mask = enc.src.row_mask();
                let cols = z.cols();
                (0..z.rows())
                    .filter(|&i| mask[i])
                    .flat_map(|i| z.data()[i * cols..(i + 1) * cols].to_vec())
                    .collect::<Vec<f64>>()
            };
            if !same_bits(&encode(&batch), &encode(&noisy)) {
                padding_bad += 1;
            }
        }
    }
    (causal_bad, padding_bad)
}

/// A small synthetic corpus encoded against its own training vocabularies.
pub struct Toy {
    pub train: Vec<slt::data::Sample>,
    pub dev: Vec<slt::data::Sample>,
    pub test: Vec<slt::data::Sample>,
    pub vocabs: slt::data::Vocabularies,
}

pub fn toy_corpus(seed: u64, n_samples: usize, gloss_vocab: usize, d_in: usize) -> Toy {
    use slt::data::{encode_samples, synthesize, SyntheticConfig, Vocabularies};
    let syn = synthesize(&SyntheticConfig {
        seed,
        n_samples,
        gloss_vocab,
        d_in,
    })
    .unwrap();
    let vocabs = Vocabularies::from_samples(&syn.train).unwrap();
    Toy {
        train: encode_samples(syn.train, &vocabs).unwrap(),
        dev: encode_samples(syn.dev, &vocabs).unwrap(),
        test: encode_samples(syn.test, &vocabs).unwrap(),
        vocabs,
    }
}

pub fn tiny_config(protocol: slt::config::Protocol, iterations: usize) -> slt::config::RunConfig {
    use slt::config::{ModelConfig, RunConfig};
    let mut cfg = RunConfig::new(protocol, "unused", "unused");
    cfg.model = ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        dropout: 0.1,
    };
    cfg.optim.batch_size = 8;
    cfg.optim.eval_every = 10;
    cfg.optim.max_iterations = iterations;
    cfg.decode.max_len = 12;
    cfg
}

/// Replays non-improving evaluations through the scheduler with the default
/// optimizer settings. Returns failure messages; empty means the trace holds.
pub fn scheduler_trace_failures() -> Vec<String> {
    use slt::config::OptimConfig;
    use slt::training::{PlateauScheduler, SchedulerAction};
    let cfg = OptimConfig::default();
    let mut failures = Vec::new();
    if (cfg.patience, cfg.factor, cfg.min_lr) != (8, 0.7, 1e-6) {
        failures.push(format!("defaults are {} / {} / {}", cfg.patience, cfg.factor, cfg.min_lr));
    }
    let mut s = PlateauScheduler::new(&cfg);
    let mut lr = cfg.lr;
    s.update(50.0, &mut lr);
    let mut expected = cfg.lr;
    let mut evals = 0;
    loop {
        let mut actions = Vec::new();
        for _ in 0..8 {
            actions.push(s.update(40.0, &mut lr));
            evals += 1;
        }
        if actions[..7].iter().any(|a| *a != SchedulerAction::None) {
            failures.push(format!("acted before the 8th stale evaluation ({evals})"));
            break;
        }
        let next = expected * 0.7;
        if next < 1e-6 {
            if actions[7] != SchedulerAction::Stop {
                failures.push(format!("lr {expected:e} would cross the floor but training continued"));
            }
            if lr != expected {
                failures.push("stopping changed the lr".into());
            }
            break;
        }
        expected = next;
        if actions[7] != SchedulerAction::ReduceLr || lr != expected {
            failures.push(format!("after {evals} evaluations lr is {lr:e}, expected {expected:e}"));
            break;
        }
    }
    // An improvement resets patience.
    let mut s = PlateauScheduler::new(&cfg);
    let mut lr = 1e-3;
    s.update(1.0, &mut lr);
    for _ in 0..7 {
        s.update(0.5, &mut lr);
    }
    s.update(2.0, &mut lr);
    for _ in 0..7 {
        s.update(0.5, &mut lr);
    }
    if lr != 1e-3 {
        failures.push("an improvement did not reset patience".into());
    }
    failures
}

/// Trains a tiny model, saves it, reloads it and re-saves it. Returns
/// failure messages; empty means the round trip is exact.
pub fn checkpoint_round_trip_failures(dir: &std::path::Path) -> Vec<String> {
    use slt::config::Protocol;
    use slt::evaluation::{evaluate, EvalOptions};
    use slt::training::{checkpoint, train, OutputDir};
    let toy = toy_corpus(4, 80, 8, 6);
    let cfg = tiny_config(Protocol::Sign2GlossText, 30);
    let out = OutputDir::create(dir).unwrap();
    let outcome = train(&cfg, &toy.train, &toy.dev, toy.vocabs.clone(), Some(&out)).unwrap();
    let mut failures = Vec::new();

    let path = dir.join("last.ckpt");
    checkpoint::save(&path, &outcome.last, &outcome.state).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (model, state) = checkpoint::load(&path).unwrap();
    if state != outcome.state {
        failures.push("optimizer or scheduler state changed".into());
    }
    if checkpoint::encode(&model, &state).unwrap() != bytes {
        failures.push("re-save is not byte-identical".into());
    }
    let opts = EvalOptions::greedy(cfg.decode.max_len);
    let before = evaluate(&outcome.last, &toy.dev, &opts).unwrap();
    let after = evaluate(&model, &toy.dev, &opts).unwrap();
    if before != after {
        failures.push("dev metrics differ after reload".into());
    }

    let (best, _) = checkpoint::load(&out.checkpoint()).unwrap();
    if evaluate(&best, &toy.dev, &opts).unwrap() != outcome.best_eval {
        failures.push("best checkpoint does not reproduce its dev evaluation".into());
    }
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        if checkpoint::decode(&bytes[..cut]).is_ok() {
            failures.push(format!("truncation at {cut} bytes was accepted"));
        }
    }
    failures
}
