//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately absent apart from scalar constants: shape
//! changes go through explicit ops ([`Graph::expand_batch`],
//! [`Graph::mul_batch`]) so every backward rule stays a few lines long.

use crate::error::{KudaError, Result};
use crate::tensor::{axis_extents, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SwapLast2(Var),
    Reshape(Var),
    ExpandBatch(Var),
    MulBatch {
        x: Var,
        r: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape plus the values and gradients of every node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every gradient buffer so that backward may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(KudaError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KudaError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B,n,k]·[B,k,m] → [B,n,m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(KudaError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_nn(
                &da[i * n * k..(i + 1) * n * k],
                &db[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, n, m], out)?,
            Op::BatchMatMul(a, b),
            &[a, b],
        ))
    }

    /// Affine map over the last axis: `x[..., in]·w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != d_in {
            return Err(KudaError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(KudaError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![d_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nn(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            d_in,
            d_out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = d_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|j| (out[idx(j)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(KudaError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(KudaError::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(KudaError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = axis_extents(&shape, axis)?;
        if len == 0 || start + len > full {
            return Err(KudaError::InvalidShape {
                op: "slice",
                shape,
                reason: "slice range out of bounds",
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis)?;
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &data[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &s)| s)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(KudaError::InvalidShape {
                op: "transpose",
                shape,
                reason: "needs at least two axes",
            });
        }
        let out = swap_last2(self.value(x).data(), &shape);
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.push(out, Op::SwapLast2(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() >= 3 {
            return Err(KudaError::InvalidShape {
                op: "expand_batch",
                shape: t.shape().to_vec(),
                reason: "result would exceed three axes",
            });
        }
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let out = Tensor::new(&shape, t.data().repeat(n))?;
        Ok(self.push(out, Op::ExpandBatch(x), &[x]))
    }

    /// Scales every batch slice `x[b, ...]` by the scalar `r[b]`.
    pub fn mul_batch(&mut self, x: Var, r: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(r).to_vec();
        if sr != [sx[0]] {
            return Err(KudaError::ShapeMismatch {
                op: "mul_batch",
                lhs: sx,
                rhs: sr,
            });
        }
        let per = self.value(x).numel() / sx[0];
        let rv = self.value(r).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(per)
            .zip(rv)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::new(&sx, data)?;
        Ok(self.push(out, Op::MulBatch { x, r }, &[x, r]))
    }

    /// Row lookup `table[ids]`, returned with shape `shape` (last axis = table width).
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let (vocab, d) = (ts[0], ts[1]);
        if shape.iter().product::<usize>() != ids.len() * d || shape.last() != Some(&d) {
            return Err(KudaError::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: shape.to_vec(),
            });
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(KudaError::OutOfVocabulary { id, vocab });
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(KudaError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(KudaError::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(KudaError::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, (0..g.len()).map(|j| g[j] * f(j)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm_nt(g, val(*b), &mut ga, n, m, k);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm_tn(val(*a), g, &mut gb, n, k, m);
                    out.push((*b, gb));
                }
                out
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(*a), val(*b));
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![0.0; batch * n * k];
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * n * m..(i + 1) * n * m],
                            &db[i * k * m..(i + 1) * k * m],
                            &mut ga[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; batch * k * m];
                    for i in 0..batch {
                        gemm_tn(
                            &da[i * n * k..(i + 1) * n * k],
                            &g[i * n * m..(i + 1) * n * m],
                            &mut gb[i * k * m..(i + 1) * k * m],
                            n,
                            k,
                            m,
                        );
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_in, d_out) = (sw[0], sw[1]);
                let rows = g.len() / d_out;
                let mut out = Vec::new();
                if needs(*x) {
                    let mut gx = vec![0.0; rows * d_in];
                    gemm_nt(g, val(*w), &mut gx, rows, d_out, d_in);
                    out.push((*x, gx));
                }
                if needs(*w) {
                    let mut gw = vec![0.0; d_in * d_out];
                    gemm_tn(val(*x), g, &mut gw, rows, d_in, d_out);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut gb = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        out.push((*b, gb));
                    }
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(da).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(g, y)| g / y).collect()),
                    (
                        *b,
                        (0..g.len())
                            .map(|j| -g[j] * da[j] / (db[j] * db[j]))
                            .collect(),
                    ),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let dx = val(*x);
                elementwise(*x, &|j| if dx[j] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Gelu(x) => {
                let dx = val(*x);
                elementwise(*x, &|j| {
                    let v = dx[j];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                })
            }
            Op::Exp(x) => elementwise(*x, &|j| y[j]),
            Op::Log(x) => {
                let dx = val(*x);
                elementwise(*x, &|j| 1.0 / dx[j])
            }
            Op::Abs(x) => {
                let dx = val(*x);
                elementwise(*x, &|j| {
                    if dx[j] > 0.0 {
                        1.0
                    } else if dx[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Square(x) => {
                let dx = val(*x);
                elementwise(*x, &|j| 2.0 * dx[j])
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = val(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut g_gain = vec![0.0; d];
                let mut g_bias = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        g_gain[j] += gr[j] * xh[j];
                        g_bias[j] += gr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gr[j] * gv[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, gx), (*gain, g_gain), (*bias, g_bias)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.shape(p)[*axis];
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(*x), *axis).unwrap();
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis).unwrap();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::SwapLast2(x) => vec![(*x, swap_last2(g, node.value.shape()))],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::ExpandBatch(x) => {
                let per = self.value(*x).numel();
                let mut gx = vec![0.0; per];
                for chunk in g.chunks(per) {
                    gx.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                vec![(*x, gx)]
            }
            Op::MulBatch { x, r } => {
                let rv = val(*r);
                let dx = val(*x);
                let per = dx.len() / rv.len();
                let gx = g
                    .chunks(per)
                    .zip(rv)
                    .flat_map(|(chunk, &s)| chunk.iter().map(move |v| v * s))
                    .collect();
                let gr = g
                    .chunks(per)
                    .zip(dx.chunks(per))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                vec![(*x, gx), (*r, gr)]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (k, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*table, gt)]
            }
        }
    }
}

fn swap_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    let batch = data.len() / (r * c);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
