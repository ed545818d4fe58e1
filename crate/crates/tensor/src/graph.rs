//! Tape-recorded computation graph.
//!
//! Every op appends a node holding its forward value, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Nodes whose inputs are all constants are marked `requires_grad = false`
//! and are skipped during the sweep (no gradient buffer is ever created for
//! them).

use std::sync::Arc;

use crate::kernels::{self, MatRef};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    /// `a + b`, `b` broadcast over the leading dims of `a`.
    Add(Var, Var),
    /// `a ⊙ b`, same broadcasting rule as `Add`.
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        shared: bool,
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Expand {
        a: Var,
        count: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
    },
    SqDist {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of tensor operations.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

/// `Some(inner)` when `small` equals a trailing suffix of `big`.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(small.iter().product())
}

/// Maps each flat output index of a permutation to its flat input index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<F>>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: value.into(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<F>>>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: impl Into<Arc<Tensor<F>>>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes that will take part in a backward sweep.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    fn push(&mut self, value: Tensor<F>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_arc(v);
        self.constant(value)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(F, F) -> F,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (big, small) = if suffix_broadcast(&sa, &sb).is_some() {
            (a, b)
        } else if suffix_broadcast(&sb, &sa).is_some() {
            (b, a)
        } else {
            return Err(mismatch(op, &sa, &sb));
        };
        let vb = self.value(big);
        let vs = self.value(small);
        let inner = vs.numel();
        let mut out = Vec::with_capacity(vb.numel());
        for chunk in vb.data().chunks_exact(inner) {
            out.extend(chunk.iter().zip(vs.data()).map(|(&x, &y)| f(x, y)));
        }
        let t = Tensor::new(vb.shape().to_vec(), out)?;
        Ok(self.push(t, make(big, small), &[big, small]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| F::from_f64(v.to_f64() * c));
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `a [.., m, k] · b`, where `b` is either a shared `[k, p]` matrix or a
    /// batch `[.., k, p]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![F::ZERO; batch * m * p];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if shared {
            kernels::gemm(MatRef::new(va, batch * m, k), MatRef::new(vb, k, p), &mut out, false);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    MatRef::new(&va[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&vb[i * k * p..(i + 1) * k * p], k, p),
                    &mut out[i * m * p..(i + 1) * m * p],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, p]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, batch, m, k, p, shared }, &[a, b]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let out = transpose_batched(self.value(a).data(), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Transpose { a, batch, rows, cols }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let map = permute_map(&s, axes);
        let src = self.value(a).data();
        let out: Vec<F> = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Permute { a, axes: axes.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Repeats `a` along a new leading axis of size `count`.
    pub fn expand(&mut self, a: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(TensorError::InvalidArgument("expand count must be positive".into()));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.numel() * count);
        for _ in 0..count {
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![count];
        shape.extend_from_slice(v.shape());
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Expand { a, count }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(TensorError::IndexOutOfRange { op: "concat", index: axis, bound: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: axis, bound: s.len() });
        }
        if len == 0 || start + len > s[axis] {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: start + len, bound: s[axis] + 1 });
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { a, axis, start, len }, &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| F::from_f64(kernels::gelu(v.to_f64())));
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap();
        let mut out = vec![F::ZERO; v.numel()];
        kernels::softmax_rows(v.data(), cols, &mut out);
        let t = Tensor::new(v.shape().to_vec(), out).expect("softmax preserves shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// `γ ⊙ (a − μ)/√(σ² + eps) + β` over the last dimension, population variance.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / d;
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = kernels::sum_f64(row) / d as f64;
            let mut var = 0.0f64;
            for &v in row {
                let c = v.to_f64() - mean;
                var += c * c;
            }
            var /= d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v.to_f64() - mean) * r;
                xhat.push(h);
                out.push(F::from_f64(g[j].to_f64() * h + b[j].to_f64()));
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::LayerNorm { a, gamma, beta, xhat, rstd }, &[a, gamma, beta]))
    }

    /// Scales each last-dim row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let mut norms = Vec::with_capacity(v.numel() / d);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(d) {
            let n = row.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|x| F::from_f64(x.to_f64() / n)));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("normalize preserves shape");
        self.push(t, Op::L2Normalize { a, norms }, &[a])
    }

    /// Pairwise squared Euclidean distances: `a [m, d]`, `b [n, d]` → `[m, n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("sq_dist", &sa, &sb));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..n {
                let rb = &vb[j * d..(j + 1) * d];
                let s: f64 = ra.iter().zip(rb).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum();
                out.push(F::from_f64(s));
            }
        }
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::SqDist { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum_f64(self.value(a).data());
        self.push(Tensor::scalar(F::from_f64(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = kernels::sum_f64(v.data()) / v.numel() as f64;
        self.push(Tensor::scalar(F::from_f64(s)), Op::Mean(a), &[a])
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy expects [rows, classes] logits with one label per row, got {s:?} and {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: bad, bound: c });
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(x.len());
        let mut total = 0.0f64;
        for (row, &label) in x.chunks_exact(c).zip(labels) {
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label].to_f64();
            probs.extend(row.iter().map(|v| (v.to_f64() - lse).exp()));
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(F::from_f64(loss)),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::ONE]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let inner = self.value(*b).numel();
                    let c = if inner == g.len() { g.to_vec() } else { kernels::sum_leading(g, inner) };
                    accumulate(grads, *b, &c);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let inner = vb.len();
                if self.needs(*a) {
                    let c: Vec<F> = g
                        .chunks_exact(inner)
                        .flat_map(|chunk| chunk.iter().zip(vb).map(|(&x, &y)| x * y))
                        .collect();
                    accumulate(grads, *a, &c);
                }
                if self.needs(*b) {
                    let mut acc = vec![0.0f64; inner];
                    for (gc, ac) in g.chunks_exact(inner).zip(va.chunks_exact(inner)) {
                        for ((s, &x), &y) in acc.iter_mut().zip(gc).zip(ac) {
                            *s += x.to_f64() * y.to_f64();
                        }
                    }
                    let c: Vec<F> = acc.into_iter().map(F::from_f64).collect();
                    accumulate(grads, *b, &c);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let v: Vec<F> = g.iter().map(|x| F::from_f64(x.to_f64() * c)).collect();
                    accumulate(grads, *a, &v);
                }
            }
            &Op::MatMul { a, b, batch, m, k, p, shared } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let slot = slot(grads, a, batch * m * k);
                    if shared {
                        kernels::gemm(MatRef::new(g, batch * m, p), MatRef::new(vb, k, p).t(), slot, true);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                MatRef::new(&g[i * m * p..(i + 1) * m * p], m, p),
                                MatRef::new(&vb[i * k * p..(i + 1) * k * p], k, p).t(),
                                &mut slot[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    }
                }
                if self.needs(b) {
                    if shared {
                        let slot = slot(grads, b, k * p);
                        kernels::gemm(MatRef::new(va, batch * m, k).t(), MatRef::new(g, batch * m, p), slot, true);
                    } else {
                        let slot = slot(grads, b, batch * k * p);
                        for i in 0..batch {
                            kernels::gemm(
                                MatRef::new(&va[i * m * k..(i + 1) * m * k], m, k).t(),
                                MatRef::new(&g[i * m * p..(i + 1) * m * p], m, p),
                                &mut slot[i * k * p..(i + 1) * k * p],
                                true,
                            );
                        }
                    }
                }
            }
            &Op::Transpose { a, batch, rows, cols } => {
                if self.needs(a) {
                    let c = transpose_batched(g, batch, cols, rows);
                    accumulate(grads, a, &c);
                }
            }
            Op::Permute { a, axes } => {
                if self.needs(*a) {
                    let map = permute_map(self.shape(*a), axes);
                    let slot = slot(grads, *a, g.len());
                    for (&src, &gv) in map.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            &Op::Expand { a, count } => {
                if self.needs(a) {
                    let inner = g.len() / count;
                    let c = kernels::sum_leading(g, inner);
                    accumulate(grads, a, &c);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, inner) = outer_inner(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut c = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            c.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, p, &c);
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start, len } => {
                if self.needs(a) {
                    let s = self.shape(a);
                    let (outer, inner) = outer_inner(s, axis);
                    let dim = s[axis];
                    let slot = slot(grads, a, outer * dim * inner);
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for (d, &v) in slot[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let c: Vec<F> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| F::from_f64(gv.to_f64() * kernels::gelu_grad(xv.to_f64())))
                        .collect();
                    accumulate(grads, *a, &c);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap();
                    let mut c = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        c.extend(yr.iter().zip(gr).map(|(yv, gv)| F::from_f64(yv.to_f64() * (gv.to_f64() - dot))));
                    }
                    accumulate(grads, *a, &c);
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j].to_f64() * hr[j];
                            db[j] += gr[j].to_f64();
                        }
                    }
                    if self.needs(*gamma) {
                        let c: Vec<F> = dg.into_iter().map(F::from_f64).collect();
                        accumulate(grads, *gamma, &c);
                    }
                    if self.needs(*beta) {
                        let c: Vec<F> = db.into_iter().map(F::from_f64).collect();
                        accumulate(grads, *beta, &c);
                    }
                }
                if self.needs(*a) {
                    let mut c = Vec::with_capacity(g.len());
                    let mut dxhat = vec![0.0f64; d];
                    for ((gr, hr), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j].to_f64() * gam[j].to_f64();
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        c.extend((0..d).map(|j| F::from_f64(r * (dxhat[j] - mean_d - hr[j] * mean_dh))));
                    }
                    accumulate(grads, *a, &c);
                }
            }
            Op::L2Normalize { a, norms } => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut c = Vec::with_capacity(y.len());
                    for ((yr, gr), &n) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        c.extend(yr.iter().zip(gr).map(|(yv, gv)| F::from_f64((gv.to_f64() - yv.to_f64() * dot) / n)));
                    }
                    accumulate(grads, *a, &c);
                }
            }
            Op::SqDist { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let d = va.len() / m;
                let mut da = vec![0.0f64; m * d];
                let mut dbv = vec![0.0f64; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let w = 2.0 * g[i * n + j].to_f64();
                        for t in 0..d {
                            let diff = va[i * d + t].to_f64() - vb[j * d + t].to_f64();
                            da[i * d + t] += w * diff;
                            dbv[j * d + t] -= w * diff;
                        }
                    }
                }
                if self.needs(*a) {
                    let c: Vec<F> = da.into_iter().map(F::from_f64).collect();
                    accumulate(grads, *a, &c);
                }
                if self.needs(*b) {
                    let c: Vec<F> = dbv.into_iter().map(F::from_f64).collect();
                    accumulate(grads, *b, &c);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let c = vec![g[0]; self.value(*a).numel()];
                    accumulate(grads, *a, &c);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let c = vec![F::from_f64(g[0].to_f64() / n as f64); n];
                    accumulate(grads, *a, &c);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let c_dim = self.shape(*logits)[1];
                    let w = g[0].to_f64() / labels.len() as f64;
                    let mut c: Vec<F> = probs.iter().map(|&p| F::from_f64(p * w)).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        let idx = r * c_dim + l;
                        c[idx] = F::from_f64((probs[idx] - 1.0) * w);
                    }
                    accumulate(grads, *logits, &c);
                }
            }
        }
    }
}

fn transpose_batched<F: Scalar>(src: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let o = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::ZERO; len])
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, contribution: &[F]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        empty => *empty = Some(contribution.to_vec()),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaf gradient buffers that were written.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let y = g.softmax(x);
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.7311).abs() < 1e-3 && (v[3] - 0.2689).abs() < 1e-3);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let shifted = g.constant(Tensor::new([1, 3], vec![5.3, 3.8, 7.0]).unwrap());
        let (a, b) = (g.softmax(x), g.softmax(shifted));
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-6);
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let y = g.layer_norm(a, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_scale_returns_beta() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new([2, 2], vec![1.0, 3.0, -4.0, 9.0]).unwrap());
        let gamma = g.constant(Tensor::zeros([2]));
        let beta = g.constant(Tensor::new([2], vec![0.25, -0.5]).unwrap());
        let y = g.layer_norm(a, gamma, beta, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 2]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 2]));
        assert!(matches!(
            g.cross_entropy(z, &[2]),
            Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: 2, bound: 2 })
        ));
    }

    #[test]
    fn gelu_zero() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros([1]));
        let y = g.gelu(z);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn constants_get_no_gradient_buffers() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::ones([2, 2]));
        let x = g.param(Tensor::ones([1, 2]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.allocated(), 1);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([3]));
        let y = g.scale(x, 2.0);
        let d = g.detach(y);
        let z = g.mul(d, y).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        // d/dx of (stop(2x) · 2x) = 2·stop(2x) = 4
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn permute_map_matches_manual_transpose() {
        let map = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_requires_suffix_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::ones([3]));
        let y = g.add(c, a).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
    }
}
