//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the backward rule. Node indices are a topological order by construction, so
//! [`Tape::backward`] walks them once in reverse.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Softmax(Var),
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not influence the differentiated output.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, materialising zeros when it is unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn require_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
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

    /// Number of leaves that accumulate gradients.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---------------------------------------------------------------- ops

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = require_2d("matmul", sa)?;
        let (k2, n) = require_2d("matmul", sb)?;
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every row of `x` channel-wise by the vector `s`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let d = last_dim(vx.shape());
        if vs.shape() != [d] {
            return Err(Error::shape("mul_row", vx.shape(), vs.shape()));
        }
        let sd = vs.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i % d])
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = require_2d("transpose", vx.shape())?;
        let src = vx.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Stacks operands along the token (leading) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero operands".into()))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(Error::shape("slice_rows", vx.shape(), &[start + len]));
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    /// Splits `x` into rows `..at` and `at..`.
    pub fn split_rows(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let rows = self.value(x).rows();
        if at > rows {
            return Err(Error::shape("split_rows", self.shape(x), &[at]));
        }
        let head = self.slice_rows(x, 0, at)?;
        let tail = self.slice_rows(x, at, rows - at)?;
        Ok((head, tail))
    }

    /// Selects rows `index[0], index[1], ..` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    limit: rows,
                });
            }
            data.extend_from_slice(vx.row(i));
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, data)?;
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.push("gather_rows", value, op, &[x])
    }

    /// Builds an `n_rows` tensor whose row `index[j]` of each part is that
    /// part's row `j`. Rows not covered by any part are zero; a row covered
    /// twice is an error.
    pub fn scatter_rows(&mut self, parts: &[(Var, &[usize])], n_rows: usize) -> Result<Var> {
        let (first, _) = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("scatter_rows of zero operands".into()))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let c: usize = tail.iter().product();
        let mut data = vec![T::zero(); n_rows * c];
        let mut taken = vec![false; n_rows];
        for (p, index) in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] || v.rows() != index.len() {
                return Err(Error::shape("scatter_rows", v.shape(), &[index.len()]));
            }
            for (j, &dst) in index.iter().enumerate() {
                if dst >= n_rows || taken[dst] {
                    return Err(Error::OutOfRange {
                        what: "scatter_rows",
                        index: dst,
                        limit: n_rows,
                    });
                }
                taken[dst] = true;
                data[dst * c..(dst + 1) * c].copy_from_slice(v.row(j));
            }
        }
        let mut shape = vec![n_rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let op = Op::ScatterRows {
            parts: parts.iter().map(|(v, i)| (*v, i.to_vec())).collect(),
        };
        self.push("scatter_rows", value, op, &inputs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = last_dim(vx.shape());
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("silu", value, Op::Silu(x), &[x])
    }

    /// Looks up rows of `table: (vocab, d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, d) = require_2d("embedding", vt.shape())?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    limit: vocab,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", value, op, &[table])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s: T = vx.data().iter().copied().sum();
        let m = s / T::of(vx.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `sum_i weights[i] * x[i]` with the weights treated as constants.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            return Err(Error::shape("weighted_sum", vx.shape(), &[weights.len()]));
        }
        let s = vx.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.to_vec(),
        };
        self.push("weighted_sum", Tensor::scalar(s), op, &[x])
    }

    /// Per-row `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = last_dim(vx.shape());
        if vg.shape() != [d] || d == 0 {
            return Err(Error::shape("rms_norm", vx.shape(), vg.shape()));
        }
        let g = vg.data();
        let mut inv_rms = Vec::with_capacity(vx.numel() / d);
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(g).map(|(&v, &gi)| v * r * gi));
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let op = Op::RmsNorm { x, gain, inv_rms };
        self.push("rms_norm", value, op, &[x, gain])
    }

    /// Rotary position embedding applied independently to each head of the
    /// `(N, heads * head_dim)` matrix `x`; row `i` sits at `positions[i]`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let vx = self.value(x);
        let (n, width) = require_2d("rope", vx.shape())?;
        if heads == 0 || !width.is_multiple_of(heads) || !(width / heads).is_multiple_of(2) || positions.len() != n {
            return Err(Error::shape("rope", vx.shape(), &[positions.len(), heads]));
        }
        let half = width / heads / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-(i as f64) / half as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        let src = vx.data();
        let mut data = vec![T::zero(); n * width];
        for r in 0..n {
            for h in 0..heads {
                let base_col = r * width + h * 2 * half;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (a, b) = (src[base_col + 2 * i], src[base_col + 2 * i + 1]);
                    data[base_col + 2 * i] = a * c - b * s;
                    data[base_col + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        let value = Tensor::new(vec![n, width], data)?;
        let op = Op::Rope { x, heads, cos, sin };
        self.push("rope", value, op, &[x])
    }

    /// Multi-head scaled dot-product attention with a causal mask inside each
    /// `(start, len)` segment of rows. Segments never attend to one another.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = require_2d("causal_attention", vq.shape())?;
        if vk.shape() != vq.shape() || vv.shape() != vq.shape() {
            return Err(Error::shape("causal_attention", vq.shape(), vk.shape()));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("causal_attention", vq.shape(), &[heads]));
        }
        if let Some(&(s, l)) = segments.iter().find(|(s, l)| s + l > n) {
            return Err(Error::shape("causal_attention", vq.shape(), &[s, l]));
        }
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = vec![T::zero(); n * width];
        let probs_len: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = Vec::with_capacity(probs_len);
        let mut row = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * width + col..][..dh];
                    row.clear();
                    for j in 0..=i {
                        let kj = &kd[(start + j) * width + col..][..dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        row.push(dot * scale);
                    }
                    softmax_in_place(&mut row);
                    let oi = &mut out[(start + i) * width + col..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(start + j) * width + col..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(T::zero(), len - i - 1));
                }
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
        };
        self.push("causal_attention", value, op, &[q, k, v])
    }

    /// Per-row `-log softmax(logits)[target]`, shape `(N)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, vocab) = require_2d("cross_entropy", vl.shape())?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let mut probs = vl.data().to_vec();
        let mut losses = Vec::with_capacity(n);
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[i];
            if t >= vocab {
                return Err(Error::OutOfRange {
                    what: "target id",
                    index: t,
                    limit: vocab,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            losses.push(lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::vector(losses);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![T::one()])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        Some(
            slot.get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()))
                .data_mut(),
        )
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    // da += g * b^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (gd, n as isize, 1),
                        (vb.data(), 1, n as isize),
                        T::one(),
                        (da, k as isize, 1),
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    // db += a^T * g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (va.data(), 1, k as isize),
                        (gd, n as isize, 1),
                        T::one(),
                        (db, n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                let d = vs.len();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (dx, &g)) in dx.iter_mut().zip(gd).enumerate() {
                        *dx += g * vs[i % d];
                    }
                }
                if let Some(ds) = self.slot(grads, *s) {
                    for (i, (&g, &xv)) in gd.iter().zip(vx).enumerate() {
                        ds[i % d] += g * xv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(dp) = self.slot(grads, *p) {
                        dp.iter_mut()
                            .zip(&gd[offset..offset + len])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    dx[start * c..start * c + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::GatherRows { x, index } => {
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &src) in index.iter().enumerate() {
                        dx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&gd[j * c..(j + 1) * c])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ScatterRows { parts } => {
                for (p, index) in parts {
                    let c = self.value(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for (j, &dst) in index.iter().enumerate() {
                            dp[j * c..(j + 1) * c]
                                .iter_mut()
                                .zip(&gd[dst * c..(dst + 1) * c])
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = last_dim(node.value.shape()).max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dx, y), g) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gd).zip(vx) {
                        let s = sigmoid(xv);
                        *d += g * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (j, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gd[j * d..(j + 1) * d])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let g = gd[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut()
                        .zip(weights)
                        .for_each(|(d, &w)| *d += gd[0] * w);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x).data(), self.value(*gain).data());
                let d = vg.len();
                let inv_d = T::of(1.0 / d as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (row, &r) in inv_rms.iter().enumerate() {
                        let xs = &vx[row * d..(row + 1) * d];
                        let gs = &gd[row * d..(row + 1) * d];
                        let t: T = (0..d).map(|j| gs[j] * vg[j] * xs[j]).sum();
                        let r3 = r * r * r * inv_d * t;
                        for (j, dxj) in dx[row * d..(row + 1) * d].iter_mut().enumerate() {
                            *dxj += r * vg[j] * gs[j] - r3 * xs[j];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (row, &r) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] += gd[row * d + j] * vx[row * d + j] * r;
                        }
                    }
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let width = self.shape(*x)[1];
                let half = width / heads / 2;
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..self.shape(*x)[0] {
                        for h in 0..*heads {
                            let base = r * width + h * 2 * half;
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let (g0, g1) = (gd[base + 2 * i], gd[base + 2 * i + 1]);
                                dx[base + 2 * i] += g0 * c + g1 * s;
                                dx[base + 2 * i + 1] += g1 * c - g0 * s;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(gd, (*q, *k, *v), *heads, segments, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let g = gd[i];
                        let row = &mut dl[i * vocab..(i + 1) * vocab];
                        for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                            *d += g * p;
                        }
                        row[t] -= g;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[T],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, width) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); n * width];
        let mut dk = vec![T::zero(); n * width];
        let mut dv = vec![T::zero(); n * width];
        let mut dp = Vec::new();
        let mut offset = 0;
        for &(start, len) in segments {
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[offset..offset + len * len];
                offset += len * len;
                for i in 0..len {
                    let gi = &gd[(start + i) * width + col..][..dh];
                    let prow = &p[i * len..i * len + i + 1];
                    dp.clear();
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vd[(start + j) * width + col..][..dh];
                        dp.push(gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                        let dvj = &mut dv[(start + j) * width + col..][..dh];
                        for (d, &g) in dvj.iter_mut().zip(gi) {
                            *d += pij * g;
                        }
                    }
                    let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qi = &qd[(start + i) * width + col..][..dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        let ds = pij * (dp[j] - dot) * scale;
                        let kj = &kd[(start + j) * width + col..][..dh];
                        let dqi = &mut dq[(start + i) * width + col..][..dh];
                        for (d, &kv) in dqi.iter_mut().zip(kj) {
                            *d += ds * kv;
                        }
                        let dkj = &mut dk[(start + j) * width + col..][..dh];
                        for (d, &qv) in dkj.iter_mut().zip(qi) {
                            *d += ds * qv;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(d) = self.slot(grads, var) {
                d.iter_mut().zip(&local).for_each(|(d, &g)| *d += g);
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
