//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and a backward rule.
//! Parents always precede children, so [`Graph::backward`] replays the
//! insertion order in reverse and never needs a separate topological sort.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::{gemm, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward {
    /// Returns one gradient buffer per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow their values (model parameters)
/// for the lifetime `'p` so that evaluation does not copy weights.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not reach it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// Sizes of a batched attention call. Queries are laid out as
/// `batch * queries` rows and keys/values as `batch * keys` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: impl Backward + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|v| &*self.nodes[v.0].value)
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let parent_grads = op.backward(&inputs, &node.value, &g, &needs);
            for (var, pg) in node.inputs.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), TensorError> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::matrix(m, n, out), vec![a, b], MatMul { m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Add))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.numel() != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, vec![x, bias], AddBias { cols: n }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Mul))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.shape() != factor.shape() {
            return Err(TensorError::Shape {
                op: "mul_const",
                left: vx.shape().to_vec(),
                right: factor.shape().to_vec(),
            });
        }
        let data = vx
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, vec![x], MulConst(factor.into_data())))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, TensorError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let mask = dropout_mask(self.value(x).numel(), rate, rng);
        self.mul_const(x, Tensor::new(shape, mask)?)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, vec![x], Scale(factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        self.push(out, vec![x], Identity)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, vec![x], Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, vec![x], Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, vec![x], Ln)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), vec![x], Sum)
    }

    /// `sum_i weights[i] * x[i]`; zero weights skip their entry entirely.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                left: vx.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let total = vx
            .data()
            .iter()
            .zip(&weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(total), vec![x], WeightedSum(weights)))
    }

    /// Row lookup: `out[r] = table[indices[r]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                index: bad,
                bound: rows,
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data);
        Ok(self.push(
            out,
            vec![table],
            GatherRows {
                indices: indices.to_vec(),
                cols,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if len == 0 || start + len > rows {
            return Err(TensorError::Index {
                index: start + len,
                bound: rows,
            });
        }
        let data = vx.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            Tensor::matrix(len, cols, data),
            vec![x],
            SliceRows { start, cols },
        ))
    }

    /// `out[r] = x[r, indices[r]]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if indices.len() != rows {
            return Err(TensorError::Shape {
                op: "pick",
                left: vx.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Index {
                index: bad,
                bound: cols,
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| vx.at(r, c))
            .collect();
        Ok(self.push(
            Tensor::vector(data),
            vec![x],
            Pick {
                indices: indices.to_vec(),
                cols,
            },
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let layout = AxisLayout::new(shape, axis);
        let mut out = vx.data().to_vec();
        layout.for_each_lane(|idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        });
        let out = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(out, vec![x], Softmax(layout)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(vx.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        self.push(out, vec![x], LogSoftmax)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: vx.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            vec![x, gain, bias],
            LayerNorm {
                normalized,
                inv_std,
                d,
            },
        ))
    }

    /// Batch normalization over the rows of `x` selected by `row_mask`.
    ///
    /// With `running = None` the selected rows' own statistics are used and
    /// returned (biased variance); otherwise the given running mean/variance.
    /// Unselected rows produce zeros and receive no gradient.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        row_mask: &[bool],
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        let vx = self.value(x);
        let (rows, d) = self.matrix_dims("batch_norm", x)?;
        if row_mask.len() != rows {
            return Err(TensorError::Shape {
                op: "batch_norm",
                left: vx.shape().to_vec(),
                right: vec![row_mask.len()],
            });
        }
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    left: vx.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let count = row_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Contract("batch_norm with no selected rows".into()));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return Err(TensorError::Shape {
                        op: "batch_norm",
                        left: vec![d],
                        right: vec![m.len()],
                    });
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in (0..rows).filter(|&r| row_mask[r]) {
                    mean.iter_mut().zip(vx.row(r)).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for r in (0..rows).filter(|&r| row_mask[r]) {
                    for (c, v) in vx.row(r).iter().enumerate() {
                        var[c] += (v - mean[c]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; rows * d];
        let mut out = vec![0.0; rows * d];
        for r in (0..rows).filter(|&r| row_mask[r]) {
            for (c, v) in vx.row(r).iter().enumerate() {
                let xh = (v - mean[c]) * inv_std[c];
                normalized[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let node = self.push(
            Tensor::matrix(rows, d, out),
            vec![x, gain, bias],
            BatchNorm {
                normalized,
                inv_std,
                row_mask: row_mask.to_vec(),
                batch_stats: stats.is_some(),
                d,
            },
        );
        Ok((node, stats))
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `mask[(b * queries + i) * keys + j]` allows query `i` of sequence `b`
    /// to see key `j`; disallowed keys are skipped entirely so their content
    /// cannot reach the output. `dropout`, when given, multiplies the
    /// attention weights per `(b, head, i, j)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        mask: &[bool],
        dropout: Option<Vec<f64>>,
    ) -> Result<Var, TensorError> {
        let AttentionLayout {
            batch,
            queries,
            keys,
            heads,
        } = layout;
        let (qr, d) = self.matrix_dims("attention", q)?;
        let (kr, kd) = self.matrix_dims("attention", k)?;
        if qr != batch * queries || kr != batch * keys || kd != d {
            return Err(TensorError::Shape {
                op: "attention",
                left: vec![qr, d],
                right: vec![kr, kd],
            });
        }
        self.same_shape("attention", k, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if mask.len() != batch * queries * keys {
            return Err(TensorError::Shape {
                op: "attention mask",
                left: vec![batch, queries, keys],
                right: vec![mask.len()],
            });
        }
        for (row, allowed) in mask.chunks(keys).enumerate() {
            if !allowed.iter().any(|&a| a) {
                return Err(TensorError::Contract(format!(
                    "attention query row {row} has every key masked"
                )));
            }
        }
        if let Some(drop) = &dropout {
            if drop.len() != batch * heads * queries * keys {
                return Err(TensorError::Shape {
                    op: "attention dropout",
                    left: vec![batch, heads, queries, keys],
                    right: vec![drop.len()],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * queries * keys];
        let mut out = vec![0.0; qr * d];
        let mut logits = vec![0.0; keys];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..queries {
                    let qrow = &qd[(b * queries + i) * d + off..][..dh];
                    let allowed = &mask[(b * queries + i) * keys..][..keys];
                    let mut max = f64::NEG_INFINITY;
                    for j in (0..keys).filter(|&j| allowed[j]) {
                        let krow = &kd[(b * keys + j) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        logits[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * queries + i) * keys..][..keys];
                    let mut total = 0.0;
                    for j in (0..keys).filter(|&j| allowed[j]) {
                        p[j] = (logits[j] - max).exp();
                        total += p[j];
                    }
                    let orow = &mut out[(b * queries + i) * d + off..][..dh];
                    for j in (0..keys).filter(|&j| allowed[j]) {
                        p[j] /= total;
                        let w = match &dropout {
                            Some(drop) => p[j] * drop[((b * heads + h) * queries + i) * keys + j],
                            None => p[j],
                        };
                        if w != 0.0 {
                            let vrow = &vd[(b * keys + j) * d + off..][..dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += w * x);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(qr, d, out),
            vec![q, k, v],
            Attention {
                layout,
                mask: mask.to_vec(),
                probs,
                dropout,
                scale,
                d,
            },
        ))
    }
}

/// Batch mean/variance of the selected rows, per column.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Iteration helper for "along one axis" reductions on row-major data.
#[derive(Clone, Copy)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn for_each_lane(&self, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
        for o in 0..self.outer {
            for j in 0..self.inner {
                let start = o * self.len * self.inner + j;
                let end = start + self.len * self.inner;
                f((start..end).step_by(self.inner));
            }
        }
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let Self { m, k, n } = *self;
        let da = needs[0].then(|| {
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, g, false, b, true, &mut da, false);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, a, true, g, false, &mut db, false);
            db
        });
        vec![da, db]
    }
}

struct Add;

impl Backward for Add {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct AddBias {
    cols: usize,
}

impl Backward for AddBias {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let dx = needs[0].then(|| g.to_vec());
        let db = needs[1].then(|| {
            let mut db = vec![0.0; self.cols];
            for row in g.chunks(self.cols) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![dx, db]
    }
}

struct Mul;

impl Backward for Mul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let prod = |other: &Tensor| g.iter().zip(other.data()).map(|(a, b)| a * b).collect();
        vec![
            needs[0].then(|| prod(inputs[1])),
            needs[1].then(|| prod(inputs[0])),
        ]
    }
}

struct MulConst(Vec<f64>);

impl Backward for MulConst {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.0).map(|(a, b)| a * b).collect())]
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct Identity;

impl Backward for Identity {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct Relu;

impl Backward for Relu {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let dx = g
            .iter()
            .zip(inputs[0].data())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(dx)]
    }
}

struct Exp;

impl Backward for Exp {
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(out.data()).map(|(a, b)| a * b).collect())]
    }
}

struct Ln;

impl Backward for Ln {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(inputs[0].data()).map(|(a, b)| a / b).collect())]
    }
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct WeightedSum(Vec<f64>);

impl Backward for WeightedSum {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|w| w * g[0]).collect())]
    }
}

struct GatherRows {
    indices: Vec<usize>,
    cols: usize,
}

impl Backward for GatherRows {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dt = vec![0.0; inputs[0].numel()];
        for (r, &i) in self.indices.iter().enumerate() {
            let src = &g[r * self.cols..(r + 1) * self.cols];
            dt[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
        vec![Some(dt)]
    }
}

struct SliceRows {
    start: usize,
    cols: usize,
}

impl Backward for SliceRows {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        dx[self.start * self.cols..self.start * self.cols + g.len()].copy_from_slice(g);
        vec![Some(dx)]
    }
}

struct Pick {
    indices: Vec<usize>,
    cols: usize,
}

impl Backward for Pick {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        for (r, &c) in self.indices.iter().enumerate() {
            dx[r * self.cols + c] += g[r];
        }
        vec![Some(dx)]
    }
}

struct Softmax(AxisLayout);

impl Backward for Softmax {
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        let mut dx = vec![0.0; y.len()];
        self.0.for_each_lane(|idx| {
            let s: f64 = idx.clone().map(|i| y[i] * g[i]).sum();
            for i in idx {
                dx[i] = y[i] * (g[i] - s);
            }
        });
        vec![Some(dx)]
    }
}

struct LogSoftmax;

impl Backward for LogSoftmax {
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let cols = out.cols();
        let mut dx = vec![0.0; g.len()];
        for ((dxr, gr), yr) in dx
            .chunks_mut(cols)
            .zip(g.chunks(cols))
            .zip(out.data().chunks(cols))
        {
            let total: f64 = gr.iter().sum();
            for c in 0..cols {
                dxr[c] = gr[c] - yr[c].exp() * total;
            }
        }
        vec![Some(dx)]
    }
}

struct LayerNorm {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    d: usize,
}

impl Backward for LayerNorm {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = self.d;
        let gain = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for (r, is) in self.inv_std.iter().enumerate() {
                let xh = &self.normalized[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for c in 0..d {
                    let dxh = gr[c] * gain[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[c];
                }
                mean_dxh /= d as f64;
                mean_dxh_xh /= d as f64;
                for c in 0..d {
                    let dxh = gr[c] * gain[c];
                    dx[r * d + c] = is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                }
            }
            dx
        });
        let (dgain, dbias) = affine_param_grads(g, &self.normalized, d, |_| true);
        vec![dx, needs[1].then_some(dgain), needs[2].then_some(dbias)]
    }
}

fn affine_param_grads(
    g: &[f64],
    normalized: &[f64],
    d: usize,
    selected: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for r in (0..g.len() / d).filter(|&r| selected(r)) {
        for c in 0..d {
            dgain[c] += g[r * d + c] * normalized[r * d + c];
            dbias[c] += g[r * d + c];
        }
    }
    (dgain, dbias)
}

struct BatchNorm {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    row_mask: Vec<bool>,
    batch_stats: bool,
    d: usize,
}

impl Backward for BatchNorm {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = self.d;
        let gain = inputs[1].data();
        let rows: Vec<usize> = (0..self.row_mask.len()).filter(|&r| self.row_mask[r]).collect();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            if self.batch_stats {
                let n = rows.len() as f64;
                let mut mean_dxh = vec![0.0; d];
                let mut mean_dxh_xh = vec![0.0; d];
                for &r in &rows {
                    for c in 0..d {
                        let dxh = g[r * d + c] * gain[c];
                        mean_dxh[c] += dxh;
                        mean_dxh_xh[c] += dxh * self.normalized[r * d + c];
                    }
                }
                mean_dxh.iter_mut().for_each(|v| *v /= n);
                mean_dxh_xh.iter_mut().for_each(|v| *v /= n);
                for &r in &rows {
                    for c in 0..d {
                        let dxh = g[r * d + c] * gain[c];
                        let xh = self.normalized[r * d + c];
                        dx[r * d + c] = self.inv_std[c] * (dxh - mean_dxh[c] - xh * mean_dxh_xh[c]);
                    }
                }
            } else {
                for &r in &rows {
                    for c in 0..d {
                        dx[r * d + c] = g[r * d + c] * gain[c] * self.inv_std[c];
                    }
                }
            }
            dx
        });
        let (dgain, dbias) = affine_param_grads(g, &self.normalized, d, |r| self.row_mask[r]);
        vec![dx, needs[1].then_some(dgain), needs[2].then_some(dbias)]
    }
}

struct Attention {
    layout: AttentionLayout,
    mask: Vec<bool>,
    probs: Vec<f64>,
    dropout: Option<Vec<f64>>,
    scale: f64,
    d: usize,
}

impl Backward for Attention {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let AttentionLayout {
            batch,
            queries,
            keys,
            heads,
        } = self.layout;
        let d = self.d;
        let dh = d / heads;
        let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dlogits = vec![0.0; keys];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..queries {
                    let allowed = &self.mask[(b * queries + i) * keys..][..keys];
                    let base = ((b * heads + h) * queries + i) * keys;
                    let p = &self.probs[base..base + keys];
                    let grow = &g[(b * queries + i) * d + off..][..dh];
                    let mut s = 0.0;
                    for j in (0..keys).filter(|&j| allowed[j]) {
                        let drop = self.dropout.as_ref().map_or(1.0, |m| m[base + j]);
                        let vrow = &vd[(b * keys + j) * d + off..][..dh];
                        let dp = dot(grow, vrow) * drop;
                        dlogits[j] = dp;
                        s += p[j] * dp;
                        let w = p[j] * drop;
                        if w != 0.0 {
                            let dvrow = &mut dv[(b * keys + j) * d + off..][..dh];
                            dvrow.iter_mut().zip(grow).for_each(|(a, x)| *a += w * x);
                        }
                    }
                    let qrow = &qd[(b * queries + i) * d + off..][..dh];
                    for j in (0..keys).filter(|&j| allowed[j]) {
                        let dl = p[j] * (dlogits[j] - s) * self.scale;
                        if dl == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * keys + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * queries + i) * d + off..][..dh];
                        dqrow.iter_mut().zip(krow).for_each(|(a, x)| *a += dl * x);
                        let dkrow = &mut dk[(b * keys + j) * d + off..][..dh];
                        dkrow.iter_mut().zip(qrow).for_each(|(a, x)| *a += dl * x);
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}
