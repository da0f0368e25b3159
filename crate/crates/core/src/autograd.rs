//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation executed in the forward pass together
//! with whatever it needs for its backward rule. Nodes are appended in
//! execution order, so parents always precede children and a single reverse
//! sweep visits each node once.
//!
//! Gradients accumulate into leaves that were registered with
//! `requires_grad`; call [`Tape::zero_grad`] to reset them.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations supported by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f32>,
        count: usize,
    },
    StraightThrough {
        soft: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Record of executed operations.
///
/// A tape and the values on it belong to one thread at a time; it is `Send`
/// but deliberately offers no shared mutation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-major strides for `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Stride in the input for each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum of `g` folded onto a trailing-suffix shape of length `small`.
fn reduce_to_suffix(g: &[f32], small: usize) -> Vec<f32> {
    let mut out = vec![0.0; small];
    for chunk in g.chunks(small) {
        add_into(&mut out, chunk);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf; gradients are kept iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if !trans_b && k == k2 => (*m, *k, *n),
            ([m, k], [n, k2]) if trans_b && k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = if trans_b {
            kernels::matmul_nt(da, db, m, k, n)
        } else {
            kernels::matmul(da, db, m, k, n)
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product over the leading axis: `[B×m×k] · [B×k×n]`, or
    /// `[B×m×k] · [B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = match (sa, sb) {
            ([ba, m, k], [bb, k2, n]) if !trans_b && ba == bb && k == k2 => (*ba, *m, *k, *n),
            ([ba, m, k], [bb, n, k2]) if trans_b && ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => return Err(Error::dim("batch_matmul", sa, sb)),
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let idx: Vec<usize> = (0..batch).collect();
        let parts = kernels::map_ordered(&idx, |&i| {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            if trans_b {
                kernels::matmul_seq(ai, &kernels::transpose(bi, n, k), m, k, n)
            } else {
                kernels::matmul_seq(ai, bi, m, k, n)
            }
        });
        let value = Tensor::new(vec![batch, m, n], parts.concat())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Pointwise op. Binary ops accept equal shapes or one operand whose
    /// shape is a trailing suffix of the other's.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Gelu, None) => Ok(self.gelu(a)),
            (op, _) => Err(Error::Config(format!(
                "wrong operand count for {op:?}"
            ))),
        }
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let sv = self.value(small).data();
        let mut out = self.value(big).data().to_vec();
        if !sv.is_empty() {
            for chunk in out.chunks_mut(sv.len()) {
                add_into(chunk, sv);
            }
        }
        let value = Tensor::new(self.shape(big).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a: big, b: small }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let sv = self.value(small).data();
        let mut out = self.value(big).data().to_vec();
        if !sv.is_empty() {
            for chunk in out.chunks_mut(sv.len()) {
                for (o, s) in chunk.iter_mut().zip(sv) {
                    *o *= s;
                }
            }
        }
        let value = Tensor::new(self.shape(big).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a: big, b: small }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| gelu(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// `(a − mean)/sqrt(var + eps) ⊙ gain + bias` over the last axis.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape {
            shape: shape.clone(),
            reason: "layer_norm needs rank >= 1".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(a).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len().checked_div(cols).unwrap_or(0);
        let mut xhat = vec![0.0f32; src.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; src.len()];
        for r in 0..rows {
            let x = &src[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f32>() / cols as f32;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (x[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", &[rows, vocab], &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0f32; src.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += f64::from(lse - row[t]);
            count += 1;
        }
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Forward value of `hard`; backward hands the incoming gradient to
    /// `soft` unchanged and nothing to `hard`.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        if self.shape(hard) != self.shape(soft) {
            return Err(Error::dim("straight_through", self.shape(hard), self.shape(soft)));
        }
        let value = self.value(hard).clone().with_requires_grad(false);
        let rg = self.rg(soft);
        Ok(self.push(value, Op::StraightThrough { soft }, rg))
    }

    /// Row lookup: `table: [V×d]`, one output row per id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value.with_requires_grad(false), Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let value = Tensor::new(vec![cols, rows], kernels::transpose(self.value(a).data(), rows, cols))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose { a, rows, cols }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Propagates d`loss`/d(leaf) into every reachable leaf that requires a
    /// gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut send = |v: Var, contrib: Vec<f32>, nodes: &[Node]| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let nodes = &self.nodes[..];
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul {
                    a,
                    b,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].requires_grad {
                        // dA = G·Bᵀ (or G·B when B was used transposed)
                        let ga = if *trans_b {
                            kernels::matmul(&g, db, *m, *n, *k)
                        } else {
                            kernels::matmul_nt(&g, db, *m, *n, *k)
                        };
                        send(*a, ga, nodes);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = if *trans_b {
                            // dB = Gᵀ·A, [n×k]
                            kernels::matmul_tn(&g, da, *n, *m, *k)
                        } else {
                            // dB = Aᵀ·G, [k×n]
                            kernels::matmul_tn(da, &g, *k, *m, *n)
                        };
                        send(*b, gb, nodes);
                    }
                }
                Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    let (m, k, n, t) = (*m, *k, *n, *trans_b);
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let idx: Vec<usize> = (0..*batch).collect();
                    if nodes[a.0].requires_grad {
                        let parts = kernels::map_ordered(&idx, |&i| {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &db[i * k * n..(i + 1) * k * n];
                            if t {
                                kernels::matmul_seq(gi, bi, m, n, k)
                            } else {
                                kernels::matmul_seq(gi, &kernels::transpose(bi, k, n), m, n, k)
                            }
                        });
                        send(*a, parts.concat(), nodes);
                    }
                    if nodes[b.0].requires_grad {
                        let parts = kernels::map_ordered(&idx, |&i| {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &da[i * m * k..(i + 1) * m * k];
                            if t {
                                kernels::matmul_seq(&kernels::transpose(gi, m, n), ai, n, m, k)
                            } else {
                                kernels::matmul_seq(&kernels::transpose(ai, m, k), gi, k, m, n)
                            }
                        });
                        send(*b, parts.concat(), nodes);
                    }
                }
                Op::Add { a, b } => {
                    let small = nodes[b.0].value.numel();
                    if nodes[b.0].requires_grad {
                        let gb = if small == g.len() {
                            g.clone()
                        } else {
                            reduce_to_suffix(&g, small)
                        };
                        send(*b, gb, nodes);
                    }
                    send(*a, g, nodes);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let small = vb.len();
                    if nodes[b.0].requires_grad {
                        let prod: Vec<f32> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                        let gb = if small == g.len() {
                            prod
                        } else {
                            reduce_to_suffix(&prod, small)
                        };
                        send(*b, gb, nodes);
                    }
                    if nodes[a.0].requires_grad {
                        let ga: Vec<f32> = g
                            .iter()
                            .enumerate()
                            .map(|(i, x)| x * vb[i % small])
                            .collect();
                        send(*a, ga, nodes);
                    }
                }
                Op::Scale { a, factor } => {
                    send(*a, g.iter().map(|x| x * factor).collect(), nodes);
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(*a, ga, nodes);
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.data();
                    let ga = g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                    send(*a, ga, nodes);
                }
                Op::Softmax {
                    a,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let mut ga = vec![0.0f32; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f32 = (0..*len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let at = base + j * inner;
                                ga[at] = y[at] * (g[at] - dot);
                            }
                        }
                    }
                    send(*a, ga, nodes);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    cols,
                    xhat,
                    rstd,
                } => {
                    let cols = *cols;
                    let gv = nodes[gain.0].value.data();
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0f32; g.len()];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let span = r * cols..(r + 1) * cols;
                            let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                            let dh: Vec<f32> = gr.iter().zip(gv).map(|(x, y)| x * y).collect();
                            let mean_dh = dh.iter().sum::<f32>() / cols as f32;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(x, y)| x * y).sum::<f32>() / cols as f32;
                            for c in 0..cols {
                                ga[r * cols + c] = rs * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                            }
                        }
                        send(*a, ga, nodes);
                    }
                    if nodes[gain.0].requires_grad {
                        let prod: Vec<f32> = g.iter().zip(xhat).map(|(x, y)| x * y).collect();
                        send(*gain, reduce_to_suffix(&prod, cols), nodes);
                    }
                    if nodes[bias.0].requires_grad {
                        send(*bias, reduce_to_suffix(&g, cols), nodes);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_index,
                    probs,
                    count,
                } => {
                    let vocab = probs.len() / targets.len().max(1);
                    let scale = g[0] / *count as f32;
                    let mut ga = vec![0.0f32; probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for c in 0..vocab {
                            ga[r * vocab + c] = probs[r * vocab + c] * scale;
                        }
                        ga[r * vocab + t] -= scale;
                    }
                    send(*logits, ga, nodes);
                }
                Op::StraightThrough { soft } => send(*soft, g, nodes),
                Op::Gather { table, ids, dim } => {
                    let mut gt = vec![0.0f32; nodes[table.0].value.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                    send(*table, gt, nodes);
                }
                Op::Reshape(a) => send(*a, g, nodes),
                Op::Permute { a, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (ga, _) = permute_data(&g, node.value.shape(), &inverse);
                    send(*a, ga, nodes);
                }
                Op::Transpose { a, rows, cols } => {
                    send(*a, kernels::transpose(&g, *cols, *rows), nodes);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.numel();
                    send(*a, vec![g[0]; n], nodes);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_grad_rows_equal_b() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn relu_and_add() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.elementwise(Elementwise::Relu, a, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.constant(t(&[2], &[3.0, 4.0]));
        let z = tape.elementwise(Elementwise::Add, x, Some(y)).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0, 6.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let y = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn square_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
        tape.zero_grad();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn softmax_edge_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let b = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(b, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() <= 1e-12 && v[1].abs() <= 1e-12);
        assert!(matches!(tape.softmax(b, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
        let s = tape.softmax(a, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-7 && (v[2] - 0.5).abs() < 1e-7);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let a = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(a, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let a = tape.constant(t(&[2], &[0.0, 2.0]));
        let y = tape.layer_norm(a, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = tape.cross_entropy(l, &[0], 99).unwrap();
        assert!((tape.value(ce).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
        let l = tape.constant(t(&[1, 2], &[1e9, 0.0]));
        let ce = tape.cross_entropy(l, &[0], 99).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-6);
        assert!(matches!(
            tape.cross_entropy(l, &[99], 99),
            Err(Error::UndefinedLoss)
        ));
    }

    #[test]
    fn straight_through_contract() {
        let mut tape = Tape::new();
        let hard = tape.leaf(t(&[2], &[1.0, 0.0]).with_requires_grad(true));
        let soft = tape.leaf(t(&[2], &[0.9, 0.1]).with_requires_grad(true));
        let out = tape.straight_through(hard, soft).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0]);
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(soft).unwrap(), &[1.0, 1.0]);
        // `hard` is reachable only through the straight-through node, which
        // sends it nothing.
        assert!(tape.grad(hard).is_none_or(|g| g.iter().all(|v| v.to_bits() == 0)));
        let bad = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.straight_through(bad, soft).is_err());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]).with_requires_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let a = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[i,j,k] = in[j,k,i]
        assert_eq!(tape.value(p).data()[1], 4.0);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
        assert!(tape.permute(a, &[0, 0, 1]).is_err());
    }
}
