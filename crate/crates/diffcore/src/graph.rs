//! Tape-style computation graph.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. [`Graph::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because inputs are
//! always created before the nodes that consume them.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, gemm};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `b` is repeated over `a` in row-major order (`a.len() % b.len() == 0`).
    AddTile(Var, Var),
    /// `a: [outer, mid, inner]`, `b: [outer, inner]` broadcast over `mid`.
    AddMid {
        a: Var,
        b: Var,
        mid: usize,
        inner: usize,
    },
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Upsample2(Var),
    Transpose12(Var),
    Reshape(Var),
    Narrow0 {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input: no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, without being tied to a parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a parameter; it tracks gradients iff the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// `a + tile(b)`: bias rows, positional tables and the like.
    pub fn add_tile(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 0 || na % nb != 0 {
            return shape_err(
                "add_tile",
                format!("{:?} is not a multiple of {:?}", self.shape(a), self.shape(b)),
            );
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::AddTile(a, b), ng))
    }

    /// `a[o, m, i] + b[o, i]` for `a: [outer, mid, inner]`.
    pub fn add_mid(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("add_mid", format!("{sa:?} vs {sb:?}"));
        }
        let (mid, inner) = (sa[1], sa[2]);
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[(i / (mid * inner)) * inner + i % inner])
            .collect();
        let t = Tensor::new(sa, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::AddMid { a, b, mid, inner }, ng))
    }

    /// `a: [.., k]` (leading axes flattened) times `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sb = self.shape(b);
        if sb.len() != 2 {
            return shape_err("matmul", format!("rhs must be rank 2, got {sb:?}"));
        }
        let (k2, n) = (sb[0], sb[1]);
        let (m, k) = self.value(a).rows_cols();
        if k != k2 {
            return shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = gd[c] * h + bd[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, cols) = self.value(a).rows_cols();
        let mut data = self.value(a).data().to_vec();
        kernels::softmax_rows(&mut data, cols);
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Scaled dot-product self-attention core on `[batch, seq, dim]` inputs,
    /// split into `heads` contiguous channel groups. No masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", s, self.shape(k), self.shape(v)),
            );
        }
        let (bsz, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("width {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bsz * heads * t * t];
        let mut out = vec![0.0; bsz * t * d];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for j in 0..t {
                        let kj = &kd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        p[i * t + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                }
                kernels::softmax_rows(p, t);
                for i in 0..t {
                    let o = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for j in 0..t {
                        let w = p[i * t + j];
                        let vj = &vd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += w * vv;
                        }
                    }
                }
            }
        }
        let tns = Tensor::new(s, out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            tns,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Temporal convolution on channel-last input `[batch, time, cin]` with
    /// weight `[kernel, cin, cout]` and bias `[cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || self.shape(b) != [sw[2]] {
            return shape_err(
                "conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {:?}", self.shape(b)),
            );
        }
        let (bsz, t_in, cin) = (sx[0], sx[1], sx[2]);
        let (kernel, cout) = (sw[0], sw[2]);
        if stride == 0 || t_in + 2 * pad < kernel {
            return shape_err(
                "conv1d",
                format!("time {t_in} too short for kernel {kernel} (pad {pad}, stride {stride})"),
            );
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let cols = kernels::im2col(self.value(x).data(), bsz, t_in, cin, kernel, stride, pad, t_out);
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(bsz * t_out * cout);
        for _ in 0..bsz * t_out {
            out.extend_from_slice(bd);
        }
        gemm(
            bsz * t_out,
            kernel * cin,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let t = Tensor::new(vec![bsz, t_out, cout], out)?;
        let ng = self.ng(&[x, w, b]);
        let keep = if self.nodes[w.0].needs_grad { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols: keep,
            },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling by 2 along the time axis of `[batch, time, ch]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("upsample2", format!("expected rank 3, got {s:?}"));
        }
        let (bsz, t, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * 2 * t * c);
        for b in 0..bsz {
            for ti in 0..t {
                let row = &xd[(b * t + ti) * c..(b * t + ti + 1) * c];
                out.extend_from_slice(row);
                out.extend_from_slice(row);
            }
        }
        let tns = Tensor::new(vec![bsz, 2 * t, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(tns, Op::Upsample2(x), ng))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("transpose12", format!("expected rank 3, got {s:?}"));
        }
        let (bsz, r, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for i in 0..r {
                for j in 0..c {
                    out[(b * c + j) * r + i] = xd[(b * r + i) * c + j];
                }
            }
        }
        let tns = Tensor::new(vec![bsz, c, r], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(tns, Op::Transpose12(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return shape_err("narrow0", format!("rows {start}..{} of {s:?}", start + len));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Narrow0 { x, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean Huber-style smooth-L1 distance to a constant target.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64], beta: f64) -> Result<Var> {
        if self.value(x).numel() != target.len() {
            return shape_err(
                "smooth_l1",
                format!("{:?} vs {} targets", self.shape(x), target.len()),
            );
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| smooth_l1_elem(a - b, beta))
            .sum();
        let n = target.len().max(1) as f64;
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                beta,
            },
            ng,
        ))
    }

    /// Inverted dropout with a caller-sampled keep mask (`true` = keep).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return shape_err("dropout", "mask length differs from input");
        }
        let s = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|k| if *k { s } else { 0.0 }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Gathers rows of `table: [vocab, dim]`; output `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("embedding", format!("table must be rank 2, got {s:?}"));
        }
        let (vocab, dim) = (s[0], s[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return shape_err("embedding", format!("index {i} out of vocabulary {vocab}"));
            }
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(vec![indices.len(), dim], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// An op whose forward value is computed by the caller. `backward` maps
    /// the output gradient to one gradient buffer per input, in order.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Var {
        let ng = self.ng(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            ng,
        )
    }

    /// Reverse pass from a single-element `loss`. A graph can be
    /// differentiated once; a second call reports [`Error::StaleGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.filter(|_| nd.needs_grad).map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::AddTile(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    let nb = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % nb] += gi;
                    }
                });
            }
            Op::AddMid { a, b, mid, inner } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[(i / (mid * inner)) * inner + i % inner] += gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols();
                let n = self.nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |s| gemm(m, n, k, g, false, bd, true, s, 1.0));
                acc(*b, &mut |s| gemm(k, m, n, ad, true, g, false, s, 1.0));
            }
            Op::Relu(a) => {
                let ad = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::gelu_grad(ad[i]);
                    }
                });
            }
            Op::Silu(a) => {
                let ad = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sg = kernels::sigmoid(ad[i]);
                        s[i] += g[i] * sg * (1.0 + ad[i] * (1.0 - sg));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.nodes[gamma.0].value.numel();
                let rows = rstd.len();
                let gd = val(*gamma);
                acc(*gamma, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..cols).map(|c| g[r * cols + c] * gd[c]).collect();
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mean_g = gh.iter().sum::<f64>() / nf;
                        let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for c in 0..cols {
                            s[r * cols + c] += rstd[r] * (gh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                acc(*a, &mut |s| {
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            s[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let sh = self.nodes[q.0].value.shape();
                let (bsz, t, d) = (sh[0], sh[1], sh[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; t * t];
                for b in 0..bsz {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        let at = |i: usize| (b * t + i) * d + h * dh;
                        for i in 0..t {
                            for j in 0..t {
                                let mut acc_dp = 0.0;
                                for c in 0..dh {
                                    acc_dp += g[at(i) + c] * vd[at(j) + c];
                                    dv[at(j) + c] += p[i * t + j] * g[at(i) + c];
                                }
                                dp[i * t + j] = acc_dp;
                            }
                        }
                        for i in 0..t {
                            let dot: f64 = (0..t).map(|j| dp[i * t + j] * p[i * t + j]).sum();
                            for j in 0..t {
                                let ds = p[i * t + j] * (dp[i * t + j] - dot) * scale;
                                for c in 0..dh {
                                    dq[at(i) + c] += ds * kd[at(j) + c];
                                    dk[at(j) + c] += ds * qd[at(i) + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (bsz, t_in, cin) = (sx[0], sx[1], sx[2]);
                let (kernel, cout) = (sw[0], sw[2]);
                let t_out = node.value.shape()[1];
                let rows = bsz * t_out;
                acc(*b, &mut |s| {
                    for r in 0..rows {
                        add_into(s, &g[r * cout..(r + 1) * cout]);
                    }
                });
                acc(*w, &mut |s| gemm(kernel * cin, rows, cout, cols, true, g, false, s, 1.0));
                if wants(*x) {
                    let mut dcols = vec![0.0; rows * kernel * cin];
                    gemm(rows, cout, kernel * cin, g, false, val(*w), true, &mut dcols, 0.0);
                    acc(*x, &mut |s| {
                        kernels::col2im(&dcols, bsz, t_in, cin, kernel, *stride, *pad, t_out, s)
                    });
                }
            }
            Op::Upsample2(x) => {
                let s3 = self.nodes[x.0].value.shape();
                let (bsz, t, c) = (s3[0], s3[1], s3[2]);
                acc(*x, &mut |s| {
                    for b in 0..bsz {
                        for ti in 0..t {
                            for ch in 0..c {
                                let o = (b * 2 * t + 2 * ti) * c + ch;
                                s[(b * t + ti) * c + ch] += g[o] + g[o + c];
                            }
                        }
                    }
                });
            }
            Op::Transpose12(x) => {
                let s3 = self.nodes[x.0].value.shape();
                let (bsz, r, c) = (s3[0], s3[1], s3[2]);
                acc(*x, &mut |s| {
                    for b in 0..bsz {
                        for i in 0..r {
                            for j in 0..c {
                                s[(b * r + i) * c + j] += g[(b * c + j) * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Narrow0 { x, start } => {
                let inner: usize = self.nodes[x.0].value.shape()[1..].iter().product();
                acc(*x, &mut |s| add_into(&mut s[start * inner..start * inner + g.len()], g));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel().max(1) as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SmoothL1 { x, target, beta } => {
                let xd = val(*x);
                let n = target.len().max(1) as f64;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * smooth_l1_grad(xd[i] - target[i], *beta) / n;
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
            Op::Embedding { table, indices } => {
                let dim = self.nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                if inputs.iter().any(|v| wants(*v)) {
                    let parts = backward(g);
                    for (v, part) in inputs.iter().zip(parts) {
                        if !part.is_empty() {
                            acc(*v, &mut |s| add_into(s, &part));
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn smooth_l1_elem(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, summed over every insertion of the parameter.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(id, g);
            }
        }
        out
    }
}
