//! Reverse-mode autodiff tape.
//!
//! Define-by-run: a fresh tape is built per forward pass (prompt lengths
//! vary), ops are recorded in topological order, and `backward` walks the
//! record once in reverse. Single-threaded by construction; distinct tapes
//! may live on distinct threads.

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Silu { a: usize },
    RmsNorm { a: usize, gain: Tensor<T>, eps: f64 },
    SoftmaxRows { a: usize, limits: Option<Vec<usize>> },
    Rope { a: usize, positions: Vec<usize>, base: f64 },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatRows { a: usize, b: usize, split: usize },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize> },
    MeanOverRows { a: usize, rows: usize },
    L1Normalize { a: usize, sum: T },
    /// KL(p || q) with constant target p; differentiable in q.
    KlConstP { q: usize, p: Vec<T>, eps: f64 },
    SumAll { a: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    /// Mean token cross-entropy; probs saved at forward for the backward rule.
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; it participates in backward iff `requires_grad` is set
    /// on the tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Record a constant leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt { a: a.0, b: b.0 }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = ops::scale(self.value(a), T::from_f64(c));
        let ng = self.needs(a);
        self.push(value, Op::Scale { a: a.0, c }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = ops::silu(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::Silu { a: a.0 }, ng)
    }

    /// Row-wise RMS norm with a frozen gain (gains are base weights, never
    /// trainable here).
    pub fn rmsnorm(&mut self, a: Var, gain: &Tensor<T>, eps: f64) -> Result<Var> {
        let value = ops::rmsnorm_rows(self.value(a), gain, eps)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::RmsNorm { a: a.0, gain: gain.clone(), eps }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var, limits: Option<Vec<usize>>) -> Result<Var> {
        let value = ops::softmax_rows(self.value(a), limits.as_deref())?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows { a: a.0, limits }, ng))
    }

    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let value = ops::rope_rows(self.value(a), positions, base)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Rope { a: a.0, positions: positions.to_vec(), base }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_cols(self.value(a), start, len)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_rows(self.value(a), start, len)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows { a: a.0, start }, ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let split = self.value(a).rows();
        let value = ops::concat_rows(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatRows { a: a.0, b: b.0, split }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = ops::concat_cols(&tensors)?;
        let widths = parts.iter().map(|v| self.value(*v).cols()).collect();
        let ng = parts.iter().any(|v| self.needs(*v));
        let ids = parts.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::ConcatCols { parts: ids, widths }, ng))
    }

    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).rows();
        let value = ops::mean_over_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::MeanOverRows { a: a.0, rows }, ng)
    }

    /// Normalize a nonnegative vector to sum 1. The backward rule assumes
    /// nonnegative input, which holds for softmax-derived scores.
    pub fn l1_normalize(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|x| *x < T::zero()) {
            return Err(Error::contract("l1_normalize of negative entries".to_string()));
        }
        let sum = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let value = ops::l1_normalize(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::L1Normalize { a: a.0, sum }, ng))
    }

    /// `sum_i p_i ln((p_i + eps) / (q_i + eps))` with constant `p`.
    pub fn kl_const_p(&mut self, p: &Tensor<T>, q: Var, eps: f64) -> Result<Var> {
        let qv = self.value(q);
        if p.shape() != qv.shape() {
            return Err(Error::shape(format!(
                "kl between {:?} and {:?}",
                p.shape(),
                qv.shape()
            )));
        }
        let e = T::from_f64(eps);
        let mut total = T::zero();
        for (&pi, &qi) in p.data().iter().zip(qv.data()) {
            total = total + pi * ((pi + e) / (qi + e)).ln();
        }
        let ng = self.needs(q);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlConstP { q: q.0, p: p.data().to_vec(), eps },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll { a: a.0 }, ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = ops::gather_rows(self.value(table), ids)?;
        let ng = self.needs(table);
        Ok(self.push(value, Op::GatherRows { table: table.0, ids: ids.to_vec() }, ng))
    }

    /// Mean next-token cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(Error::shape(format!("{} targets for {} rows", targets.len(), m)));
        }
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for i in 0..m {
            if targets[i] >= v {
                return Err(Error::input(format!("target {} out of vocab {}", targets[i], v)));
            }
            let row = lv.row(i);
            ops::softmax_into(row, &mut probs[i * v..(i + 1) * v])?;
            total = total - (probs[i * v + targets[i]] + T::from_f64(1e-30)).ln();
        }
        total = total * T::from_f64(1.0 / m as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Backpropagate from a scalar loss; visits each node exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar loss of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.as_ref().map(|g| g.data().to_vec()) else {
                continue;
            };
            self.apply_backward(i, &upstream)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: &[T]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let shape = self.nodes[target].value.shape().to_vec();
        let grad = self.nodes[target]
            .grad
            .get_or_insert_with(|| Tensor::zeros(shape));
        for (g, &c) in grad.data_mut().iter_mut().zip(contribution) {
            *g = *g + c;
        }
    }

    fn apply_backward(&mut self, i: usize, g: &[T]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let gt = Tensor::from_vec(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                // dA = G @ B^T, dB = A^T @ G
                let da = ops::matmul_nt(&gt, &self.nodes[b].value)?;
                let db = ops::matmul(&ops::transpose(&self.nodes[a].value), &gt)?;
                self.accumulate(a, da.data());
                self.accumulate(b, db.data());
            }

            Op::MatMulNt { a, b } => {
                let (a, b) = (*a, *b);
                let gt = Tensor::from_vec(self.nodes[i].value.shape().to_vec(), g.to_vec())?;
                // C = A @ B^T: dA = G @ B, dB = G^T @ A
                let da = ops::matmul(&gt, &self.nodes[b].value)?;
                let db = ops::matmul(&ops::transpose(&gt), &self.nodes[a].value)?;
                self.accumulate(a, da.data());
                self.accumulate(b, db.data());
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<T> =
                    g.iter().zip(self.nodes[b].value.data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> =
                    g.iter().zip(self.nodes[a].value.data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }

            Op::Scale { a, c } => {
                let (a, c) = (*a, T::from_f64(*c));
                let da: Vec<T> = g.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }

            Op::Silu { a } => {
                let a = *a;
                let da: Vec<T> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(&g, &x)| {
                        let s = ops::sigmoid(x);
                        g * (s + x * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(a, &da);
            }

            Op::RmsNorm { a, gain, eps } => {
                let a = *a;
                let x = &self.nodes[a].value;
                let (m, d) = (x.rows(), x.cols());
                let inv_d = 1.0 / d as f64;
                let mut da = vec![T::zero(); m * d];
                for r in 0..m {
                    let row = x.row(r);
                    let grow = &g[r * d..(r + 1) * d];
                    let ms = ops::dot(row, row).to_f64() * inv_d;
                    let rms = (ms + eps).sqrt();
                    // w_j = g_j * gain_j; dx_j = w_j/rms - x_j * (w . x) / (d * rms^3)
                    let mut wx = 0.0;
                    for j in 0..d {
                        wx += grow[j].to_f64() * gain.data()[j].to_f64() * row[j].to_f64();
                    }
                    let k = wx / (d as f64 * rms * rms * rms);
                    for j in 0..d {
                        let w = grow[j].to_f64() * gain.data()[j].to_f64();
                        da[r * d + j] = T::from_f64(w / rms - row[j].to_f64() * k);
                    }
                }
                self.accumulate(a, &da);
            }

            Op::SoftmaxRows { a, limits } => {
                let a = *a;
                let s = &self.nodes[i].value;
                let (m, n) = (s.rows(), s.cols());
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    let limit = limits.as_ref().map_or(n, |l| l[r].min(n));
                    let srow = &s.row(r)[..limit];
                    let grow = &g[r * n..r * n + limit];
                    let gs = ops::dot(grow, srow);
                    for j in 0..limit {
                        da[r * n + j] = srow[j] * (grow[j] - gs);
                    }
                }
                self.accumulate(a, &da);
            }

            Op::Rope { a, positions, base } => {
                let a = *a;
                let d = self.nodes[i].value.cols();
                let m = self.nodes[i].value.rows();
                let mut da = vec![T::zero(); m * d];
                // Rotation is orthogonal: gradient rotates by the transpose.
                for r in 0..m {
                    let pos = positions[r] as f64;
                    for j in 0..d / 2 {
                        let theta = pos * base.powf(-2.0 * j as f64 / d as f64);
                        let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                        let (ga, gb) = (g[r * d + 2 * j], g[r * d + 2 * j + 1]);
                        da[r * d + 2 * j] = ga * cos + gb * sin;
                        da[r * d + 2 * j + 1] = -ga * sin + gb * cos;
                    }
                }
                self.accumulate(a, &da);
            }

            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let src_cols = self.nodes[a].value.cols();
                let (m, len) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let mut da = vec![T::zero(); m * src_cols];
                for r in 0..m {
                    for j in 0..len {
                        da[r * src_cols + start + j] = g[r * len + j];
                    }
                }
                self.accumulate(a, &da);
            }

            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let n = self.nodes[i].value.cols();
                let src_rows = self.nodes[a].value.rows();
                let len = self.nodes[i].value.rows();
                let mut da = vec![T::zero(); src_rows * n];
                da[start * n..(start + len) * n].copy_from_slice(g);
                self.accumulate(a, &da);
            }

            Op::ConcatRows { a, b, split } => {
                let (a, b, split) = (*a, *b, *split);
                let n = self.nodes[i].value.cols();
                self.accumulate(a, &g[..split * n]);
                let gb = g[split * n..].to_vec();
                self.accumulate(b, &gb);
            }

            Op::ConcatCols { parts, widths } => {
                let parts = parts.clone();
                let widths = widths.clone();
                let m = self.nodes[i].value.rows();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let mut gp = vec![T::zero(); m * w];
                    for r in 0..m {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(*p, &gp);
                    offset += w;
                }
            }

            Op::MeanOverRows { a, rows } => {
                let (a, rows) = (*a, *rows);
                let n = self.nodes[i].value.cols();
                let inv = T::from_f64(1.0 / rows as f64);
                let mut da = vec![T::zero(); rows * n];
                for r in 0..rows {
                    for j in 0..n {
                        da[r * n + j] = g[j] * inv;
                    }
                }
                self.accumulate(a, &da);
            }

            Op::L1Normalize { a, sum } => {
                let (a, sum) = (*a, *sum);
                let y = &self.nodes[i].value;
                let gy = ops::dot(g, y.data());
                let inv = T::one() / sum;
                let da: Vec<T> = g.iter().map(|&gj| (gj - gy) * inv).collect();
                self.accumulate(a, &da);
            }

            Op::KlConstP { q, p, eps } => {
                let q = *q;
                let e = T::from_f64(*eps);
                let gs = g[0];
                let da: Vec<T> = p
                    .iter()
                    .zip(self.nodes[q].value.data())
                    .map(|(&pi, &qi)| -gs * pi / (qi + e))
                    .collect();
                self.accumulate(q, &da);
            }

            Op::SumAll { a } => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a].value.numel()];
                self.accumulate(a, &da);
            }

            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[i].value.cols();
                let mut da = vec![T::zero(); self.nodes[table].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        da[id * d + j] = da[id * d + j] + g[r * d + j];
                    }
                }
                self.accumulate(table, &da);
            }

            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let m = targets.len();
                let v = self.nodes[logits].value.cols();
                let inv_m = T::from_f64(1.0 / m as f64);
                let gs = g[0];
                let mut da = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    da[r * v + t] = da[r * v + t] - T::one();
                }
                for x in da.iter_mut() {
                    *x = *x * gs * inv_m;
                }
                self.accumulate(logits, &da);
            }
        }
        Ok(())
    }
}

/// Max relative error between analytic gradients and central finite
/// differences: `|(f(p+h) - f(p-h))/(2h) - grad| / (|grad| + h)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic_grad: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic_grad.len());
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - analytic_grad[i]).abs() / (analytic_grad[i].abs() + h);
        worst = worst.max(rel);
    }
    worst
}
