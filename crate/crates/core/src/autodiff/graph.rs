//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. Node indices are therefore already a topological order, and the
//! backward pass is a single reverse sweep. A fresh graph is built per
//! training step and dropped after the optimizer update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::error::{FocalError, Result};
use crate::tensor::{Scalar, Tensor, TensorId};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients flow through [`Graph::clip_st`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipGradient {
    /// Upstream gradient passes unchanged, even where the value was clipped.
    #[default]
    StraightThrough,
    /// Zero gradient wherever the input lies outside `[lo, hi]`.
    Hard,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    PrefixMean(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    CausalMask(Var),
    Softmax {
        x: Var,
        t: T,
    },
    DivRows {
        x: Var,
        s: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        d_head: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    Clip {
        x: Var,
        lo: T,
        hi: T,
        mode: ClipGradient,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<TensorId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / cols, cols)
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a standalone (non-trainable) tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Registers a tensor as a leaf. Registering the same tensor twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let v = self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.is_trainable(),
        );
        self.leaves.insert(t.id(), v);
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.data().to_vec(), shape.to_vec(), Op::Leaf, false))
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(FocalError::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FocalError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(FocalError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul_nt", a)?;
        let (n, k2) = self.expect_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(FocalError::Dimension {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), ng)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![s / n], vec![1], Op::Mean(a), ng)
    }

    /// Running mean of a vector: `y[i] = mean(x[0..=i])`.
    pub fn prefix_mean(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(FocalError::Dimension {
                op: "prefix_mean",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut run = T::zero();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                run += x;
                run / T::of((i + 1) as f64)
            })
            .collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::PrefixMean(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(FocalError::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(a), ng))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.expect_2d("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(FocalError::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![r, len], Op::SliceCols { x: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| FocalError::Usage("concat_cols of nothing".into()))?;
        let (r, _) = self.expect_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.expect_2d("concat_cols", p)?;
            if pr != r {
                return Err(FocalError::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![r, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row lookup (embedding): `out[i] = table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.expect_2d("gather_rows", table)?;
        if rows.is_empty() {
            return Err(FocalError::Data("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(FocalError::Data(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            vec![rows.len(), d],
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.expect_2d("causal_mask", a)?;
        if r != c {
            return Err(FocalError::Dimension {
                op: "causal_mask",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            row[i + 1..].iter_mut().for_each(|v| *v = T::neg_infinity());
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![r, c], Op::CausalMask(a), ng))
    }

    /// Softmax along the last axis of `z / t`, computed as
    /// `softmax((z - max z) / t)`.
    pub fn softmax_t(&mut self, z: Var, t: T) -> Result<Var> {
        if !(t > T::zero()) || !t.is_finite() {
            return Err(FocalError::Parameter(format!(
                "softmax temperature must be positive and finite, got {t}"
            )));
        }
        let (_, cols) = rows_cols(self.shape(z));
        let src = self.value(z);
        let mut out = vec![T::zero(); src.len()];
        for (row_idx, (row, dst)) in src
            .chunks_exact(cols)
            .zip(out.chunks_exact_mut(cols))
            .enumerate()
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(FocalError::InvalidMask(format!(
                    "softmax row {row_idx} has no finite logit"
                )));
            }
            let mut total = 0.0f64;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = if x == T::neg_infinity() {
                    T::zero()
                } else {
                    ((x - max) / t).exp()
                };
                total += d.as_f64();
            }
            let inv = T::of(1.0 / total);
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let ng = self.needs(z);
        let shape = self.shape(z).to_vec();
        Ok(self.push(out, shape, Op::Softmax { x: z, t }, ng))
    }

    /// Divides each row of `x` by a scalar: `s` has shape `[1]` (shared) or
    /// `[rows]` (one divisor per row).
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let sl = self.value(s).len();
        if self.shape(s).len() != 1 || (sl != 1 && sl != rows) {
            return Err(FocalError::Dimension {
                op: "div_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks_exact(cols)
            .enumerate()
            .flat_map(|(i, row)| {
                let d = sv[if sl == 1 { 0 } else { i }];
                row.iter().map(move |&v| v / d)
            })
            .collect();
        let ng = self.needs(x) || self.needs(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::DivRows { x, s }, ng))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] {
            return Err(FocalError::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps > T::zero()) {
            return Err(FocalError::Parameter(format!(
                "rms_norm eps must be positive, got {eps}"
            )));
        }
        let g = self.value(gain);
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        let mut inv_rms = Vec::with_capacity(src.len() / d);
        let dn = T::of(d as f64);
        for row in src.chunks_exact(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * r * gv));
        }
        let ng = self.needs(x) || self.needs(gain);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Silu(x), ng)
    }

    /// Gated feed-forward: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let up = self.matmul(x, w_up)?;
        let act = self.silu(gate);
        let h = self.mul(act, up)?;
        self.matmul(h, w_down)
    }

    /// Rotary position embedding over rows of `x[n × (h·d_head)]`.
    ///
    /// Within each head, consecutive pairs `(2i, 2i+1)` of row `r` are rotated
    /// by `positions[r] · theta^(-2i/d_head)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64, d_head: usize) -> Result<Var> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(FocalError::Config(format!(
                "rope needs an even head width, got {d_head}"
            )));
        }
        let (n, d) = self.expect_2d("rope", x)?;
        if d % d_head != 0 || positions.len() != n {
            return Err(FocalError::Dimension {
                op: "rope",
                lhs: vec![n, d],
                rhs: vec![positions.len(), d_head],
            });
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / d_head as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..n {
            let (c, s) = (
                &cos[r * half..(r + 1) * half],
                &sin[r * half..(r + 1) * half],
            );
            for h in 0..d / d_head {
                let base = r * d + h * d_head;
                for i in 0..half {
                    let (x0, x1) = (src[base + 2 * i], src[base + 2 * i + 1]);
                    out[base + 2 * i] = x0 * c[i] - x1 * s[i];
                    out[base + 2 * i + 1] = x0 * s[i] + x1 * c[i];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            vec![n, d],
            Op::Rope {
                x,
                cos,
                sin,
                d_head,
            },
            ng,
        ))
    }

    /// Mean token negative log-likelihood. Rows whose target equals `ignore`
    /// are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (n, v) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(FocalError::Dimension {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(FocalError::Data(format!(
                "target {bad} out of range for vocabulary of {v}"
            )));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for ((row, p), &tgt) in src
            .chunks_exact(v)
            .zip(probs.chunks_exact_mut(v))
            .zip(targets)
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pv, &x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                z += *pv;
            }
            let inv = T::one() / z;
            p.iter_mut().for_each(|pv| *pv *= inv);
            if tgt != ignore {
                total += z.ln() + max - row[tgt];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let ng = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Elementwise clip to `[lo, hi]` with the chosen gradient contract.
    pub fn clip_st(&mut self, x: Var, lo: T, hi: T, mode: ClipGradient) -> Result<Var> {
        if !(lo < hi) {
            return Err(FocalError::Config(format!(
                "clip bounds need lo < hi, got [{lo}, {hi}]"
            )));
        }
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Clip { x, lo, hi, mode }, ng))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(FocalError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match self.leaf_grads.get_mut(&idx) {
                        Some(existing) => add_into(existing, &g),
                        None => {
                            self.leaf_grads.insert(idx, g);
                        }
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(*a) {
                        let bv = &self.nodes[b.0].value;
                        matmul_nt(&g, bv, acc(&mut grads, *a, m * k), m, n, k);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.0].value;
                        matmul_tn(av, &g, acc(&mut grads, *b, k * n), k, m, n);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[0];
                    if self.needs(*a) {
                        let bv = &self.nodes[b.0].value;
                        matmul_nn(&g, bv, acc(&mut grads, *a, m * k), m, n, k);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.0].value;
                        matmul_tn(&g, av, acc(&mut grads, *b, n * k), n, m, k);
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if self.needs(p) {
                            add_into(acc(&mut grads, p, g.len()), &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bv = &self.nodes[b.0].value;
                        let ga = acc(&mut grads, a, g.len());
                        for ((d, &gv), &y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if self.needs(b) {
                        let av = &self.nodes[a.0].value;
                        let gb = acc(&mut grads, b, g.len());
                        for ((d, &gv), &x) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(&g) {
                        *d += gv * *c;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    acc(&mut grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.len();
                    let share = g[0] / T::of(len as f64);
                    acc(&mut grads, *a, len)
                        .iter_mut()
                        .for_each(|d| *d += share);
                }
                Op::PrefixMean(a) => {
                    let len = g.len();
                    let ga = acc(&mut grads, *a, len);
                    let mut suffix = T::zero();
                    for j in (0..len).rev() {
                        suffix += g[j] / T::of((j + 1) as f64);
                        ga[j] += suffix;
                    }
                }
                Op::Reshape(a) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let w = node.shape[1];
                    let gx = acc(&mut grads, *x, r * c);
                    for (i, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + w], gr);
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.shape[0], node.shape[1]);
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].shape[1];
                        if self.needs(p) {
                            let gp = acc(&mut grads, p, r * w);
                            for i in 0..r {
                                add_into(
                                    &mut gp[i * w..(i + 1) * w],
                                    &g[i * total + off..i * total + off + w],
                                );
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherRows { table, rows } => {
                    let (v, d) = (self.nodes[table.0].shape[0], self.nodes[table.0].shape[1]);
                    let gt = acc(&mut grads, *table, v * d);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gt[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
                Op::CausalMask(a) => {
                    let c = node.shape[1];
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, (dst, src)) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate()
                    {
                        add_into(&mut dst[..=i], &src[..=i]);
                    }
                }
                Op::Softmax { x, t } => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = &node.value;
                    let inv_t = T::one() / *t;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((yr, gr), dst) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - inner) * inv_t;
                        }
                    }
                }
                Op::DivRows { x, s } => {
                    let (x, s) = (*x, *s);
                    let (_, cols) = rows_cols(&node.shape);
                    let sv = self.nodes[s.0].value.clone();
                    let shared = sv.len() == 1;
                    if self.needs(x) {
                        let gx = acc(&mut grads, x, g.len());
                        for (i, (dst, gr)) in gx
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .enumerate()
                        {
                            let d = sv[if shared { 0 } else { i }];
                            for (a, &b) in dst.iter_mut().zip(gr) {
                                *a += b / d;
                            }
                        }
                    }
                    if self.needs(s) {
                        // d(x/s)/ds = -(x/s)/s = -y/s
                        let y = &self.nodes[idx].value;
                        let gs = acc(&mut grads, s, sv.len());
                        for (i, (yr, gr)) in
                            y.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate()
                        {
                            let j = if shared { 0 } else { i };
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            gs[j] -= dot / sv[j];
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (x, gain) = (*x, *gain);
                    let (_, d) = rows_cols(&node.shape);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let dn = T::of(d as f64);
                    if self.needs(x) {
                        let gx = acc(&mut grads, x, g.len());
                        for (((xr, gr), dst), &r) in xv
                            .chunks_exact(d)
                            .zip(g.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .zip(inv_rms)
                        {
                            let dot: T = xr
                                .iter()
                                .zip(gr)
                                .zip(gv)
                                .map(|((&a, &b), &c)| a * b * c)
                                .sum();
                            let coeff = r * r * r * dot / dn;
                            for (((dv, &xi), &gi), &wi) in dst.iter_mut().zip(xr).zip(gr).zip(gv) {
                                *dv += r * wi * gi - coeff * xi;
                            }
                        }
                    }
                    if self.needs(gain) {
                        let gg = acc(&mut grads, gain, d);
                        for ((xr, gr), &r) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(inv_rms)
                        {
                            for ((dv, &xi), &gi) in gg.iter_mut().zip(xr).zip(gr) {
                                *dv += gi * xi * r;
                            }
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gv * s * (T::one() + v * (T::one() - s));
                    }
                }
                Op::Rope {
                    x,
                    cos,
                    sin,
                    d_head,
                } => {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let half = d_head / 2;
                    let gx = acc(&mut grads, *x, g.len());
                    for r in 0..n {
                        let (c, s) = (
                            &cos[r * half..(r + 1) * half],
                            &sin[r * half..(r + 1) * half],
                        );
                        for h in 0..d / d_head {
                            let base = r * d + h * d_head;
                            for i in 0..half {
                                let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                                gx[base + 2 * i] += g0 * c[i] + g1 * s[i];
                                gx[base + 2 * i + 1] += g1 * c[i] - g0 * s[i];
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let v = self.nodes[logits.0].shape[1];
                        let scale = g[0] / T::of(*count as f64);
                        let gl = acc(&mut grads, *logits, probs.len());
                        for ((dst, p), &t) in gl
                            .chunks_exact_mut(v)
                            .zip(probs.chunks_exact(v))
                            .zip(targets)
                        {
                            if t == *ignore {
                                continue;
                            }
                            for (d, &pv) in dst.iter_mut().zip(p) {
                                *d += pv * scale;
                            }
                            dst[t] -= scale;
                        }
                    }
                }
                Op::Clip { x, lo, hi, mode } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc(&mut grads, *x, g.len());
                    for ((d, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        let pass = match mode {
                            ClipGradient::StraightThrough => true,
                            ClipGradient::Hard => v >= *lo && v <= *hi,
                        };
                        if pass {
                            *d += gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Adds this graph's gradient for `t` into `t`'s gradient slot.
    pub fn accumulate_into(&self, t: &mut Tensor<T>) {
        if let Some(g) = self.leaves.get(&t.id()).and_then(|v| self.grad(*v)) {
            t.accumulate_grad(g);
        }
    }
}
