//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only reference earlier nodes.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{matmul, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    /// Normalization without affine; `rstd` per normalized group.
    LayerNormRows { x: Var, rstd: Vec<f64> },
    GroupNorm { x: Var, groups: usize, rstd: Vec<f64> },
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    Upsample2(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    PadCols(Var),
    SumAll(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
}

/// Gradients of every node with respect to the scalar passed to
/// [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_of_node: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with the parameter store; unused parameters get zeros.
    pub fn param_grads(&self, params: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        for &(node, pidx) in &self.param_of_node {
            if let Some(g) = &self.grads[node] {
                out[pidx].add_assign(g);
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub const NORM_EPS: f64 = 1e-5;

/// (index_a, weight_a, index_b, weight_b) for output position `j` of a 2x
/// linear upsample with half-pixel centers.
#[inline]
fn upsample_taps(j: usize, len: usize) -> (usize, f64, usize, f64) {
    let m = j / 2;
    if j % 2 == 0 {
        let other = m.saturating_sub(1);
        (m, 0.75, other, 0.25)
    } else {
        let other = (m + 1).min(len - 1);
        (m, 0.75, other, 0.25)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked (e.g. to differentiate w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&v) = self.param_nodes.get(&idx) {
            return v;
        }
        let value = self.params.get_index(idx).clone();
        let v = self.push(value, Op::Param, true);
        self.param_nodes.insert(idx, v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a[r, c] + bias[0, c]`
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, x.cols), "add_row bias shape");
        let mut out = x.clone();
        for r in 0..x.rows {
            for (o, bv) in out.data[r * x.cols..(r + 1) * x.cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    /// `a[r, c] + bias[r, 0]`
    pub fn add_col(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (x.rows, 1), "add_col bias shape");
        let mut out = x.clone();
        for r in 0..x.rows {
            let bv = b.data[r];
            out.data[r * x.cols..(r + 1) * x.cols]
                .iter_mut()
                .for_each(|o| *o += bv);
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddCol(a, bias), rg)
    }

    /// `a[r, c] * s[r, 0]`
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (x, g) = (self.value(a), self.value(s));
        assert_eq!((g.rows, g.cols), (x.rows, 1), "mul_col shape");
        let mut out = x.clone();
        for r in 0..x.rows {
            let gv = g.data[r];
            out.data[r * x.cols..(r + 1) * x.cols]
                .iter_mut()
                .for_each(|o| *o *= gv);
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulCol(a, s), rg)
    }

    /// `a[r, c] * s[0, c]`
    pub fn mul_row(&mut self, a: Var, s: Var) -> Var {
        let (x, g) = (self.value(a), self.value(s));
        assert_eq!((g.rows, g.cols), (1, x.cols), "mul_row shape");
        let mut out = x.clone();
        for r in 0..x.rows {
            for (o, gv) in out.data[r * x.cols..(r + 1) * x.cols].iter_mut().zip(&g.data) {
                *o *= gv;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulRow(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(
            x.rows,
            x.cols,
            x.data.iter().map(|&z| z * sigmoid(z)).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(
            x.rows,
            x.cols,
            x.data
                .iter()
                .map(|&z| 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()))
                .collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows {
            let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization (no affine).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows { x: a, rstd }, rg)
    }

    /// Group normalization of a `[channels, length]` map (no affine).
    pub fn group_norm(&mut self, a: Var, groups: usize) -> Var {
        let x = self.value(a);
        assert!(groups > 0 && x.rows % groups == 0, "channels not divisible by groups");
        let span = (x.rows / groups) * x.cols;
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(groups);
        for g in 0..groups {
            let chunk = &mut out.data[g * span..(g + 1) * span];
            let n = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupNorm { x: a, groups, rstd }, rg)
    }

    /// Unfolds `[C, L]` into `[C * kernel, L_out]` for a 1-D convolution.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(a);
        let (c, l) = x.shape();
        assert!(l + 2 * pad >= kernel, "sequence shorter than kernel");
        let lout = (l + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(c * kernel, lout);
        for ch in 0..c {
            let src = &x.data[ch * l..(ch + 1) * l];
            for j in 0..kernel {
                let dst = &mut out.data[(ch * kernel + j) * lout..(ch * kernel + j + 1) * lout];
                for (o, d) in dst.iter_mut().enumerate() {
                    let pos = (o * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < l {
                        *d = src[pos as usize];
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::Im2Col {
                x: a,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// 2x linear upsampling along the columns of `[C, L]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (c, l) = x.shape();
        let mut out = Tensor::zeros(c, 2 * l);
        for ch in 0..c {
            for j in 0..2 * l {
                let (i0, w0, i1, w1) = upsample_taps(j, l);
                out.data[ch * 2 * l + j] = w0 * x.data[ch * l + i0] + w1 * x.data[ch * l + i1];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Upsample2(a), rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "concat_rows column mismatch");
        let mut data = x.data.clone();
        data.extend_from_slice(&y.data);
        let out = Tensor::from_vec(x.rows + y.rows, x.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatRows(a, b), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { x: a, start }, rg)
    }

    /// Zero-pads columns on the right up to `total`.
    pub fn pad_cols(&mut self, a: Var, total: usize) -> Var {
        let x = self.value(a);
        assert!(total >= x.cols);
        let mut out = Tensor::zeros(x.rows, total);
        for r in 0..x.rows {
            out.data[r * total..r * total + x.cols].copy_from_slice(x.row(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::PadCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    /// Column-wise mean over rows, giving `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale(1.0 / x.rows as f64);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Back-propagates from a `1x1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        let param_of_node = self
            .param_nodes
            .iter()
            .map(|(&pidx, &v)| (v.0, pidx))
            .collect();
        Gradients {
            grads,
            param_of_node,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = if !*ta {
                        matmul(gy, false, bv, !*tb)
                    } else {
                        matmul(bv, *tb, gy, true)
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = if !*tb {
                        matmul(av, !*ta, gy, false)
                    } else {
                        matmul(gy, true, av, *ta)
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                let mut g = gy.clone();
                g.scale(-1.0);
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = Tensor::from_vec(
                        gy.rows,
                        gy.cols,
                        gy.data.iter().zip(&bv.data).map(|(g, b)| g * b).collect(),
                    );
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = Tensor::from_vec(
                        gy.rows,
                        gy.cols,
                        gy.data.iter().zip(&av.data).map(|(g, a)| g * a).collect(),
                    );
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*bias) {
                    let mut gb = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, v) in gb.data.iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::AddCol(a, bias) => {
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*bias) {
                    let gb = Tensor::from_vec(
                        gy.rows,
                        1,
                        (0..gy.rows).map(|r| gy.row(r).iter().sum()).collect(),
                    );
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.rg(*a) {
                    let mut g = gy.clone();
                    for r in 0..g.rows {
                        let f = sv.data[r];
                        g.data[r * g.cols..(r + 1) * g.cols]
                            .iter_mut()
                            .for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*s) {
                    let g = Tensor::from_vec(
                        gy.rows,
                        1,
                        (0..gy.rows)
                            .map(|r| gy.row(r).iter().zip(av.row(r)).map(|(g, x)| g * x).sum())
                            .collect(),
                    );
                    self.accumulate(grads, *s, g);
                }
            }
            Op::MulRow(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.rg(*a) {
                    let mut g = gy.clone();
                    for r in 0..g.rows {
                        for (v, f) in g.data[r * g.cols..(r + 1) * g.cols].iter_mut().zip(&sv.data) {
                            *v *= f;
                        }
                    }
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*s) {
                    let mut g = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for ((o, gv), x) in g.data.iter_mut().zip(gy.row(r)).zip(av.row(r)) {
                            *o += gv * x;
                        }
                    }
                    self.accumulate(grads, *s, g);
                }
            }
            Op::Scale(a, s) => {
                let mut g = gy.clone();
                g.scale(*s);
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Silu(a) => {
                let x = self.value(*a);
                let g = Tensor::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &z)| {
                            let s = sigmoid(z);
                            g * s * (1.0 + z * (1.0 - s))
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let g = Tensor::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &z)| {
                            let u = GELU_C * (z + GELU_A * z * z * z);
                            let th = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                            g * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du)
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, g);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, gy.transpose()),
            Op::SoftmaxRows(a) => {
                let mut g = Tensor::zeros(gy.rows, gy.cols);
                for r in 0..gy.rows {
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..gy.cols {
                        g.data[r * gy.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNormRows { x, rstd } => {
                let mut g = Tensor::zeros(gy.rows, gy.cols);
                let n = gy.cols as f64;
                for r in 0..gy.rows {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..gy.cols {
                        g.data[r * gy.cols + c] = rstd[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::GroupNorm { x, groups, rstd } => {
                let span = gy.len() / groups;
                let mut g = Tensor::zeros(gy.rows, gy.cols);
                for grp in 0..*groups {
                    let range = grp * span..(grp + 1) * span;
                    let (yr, gr) = (&y.data[range.clone()], &gy.data[range.clone()]);
                    let n = span as f64;
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (k, o) in g.data[range].iter_mut().enumerate() {
                        *o = rstd[grp] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (c, l) = self.value(*x).shape();
                let lout = gy.cols;
                let mut g = Tensor::zeros(c, l);
                for ch in 0..c {
                    for j in 0..*kernel {
                        let src = gy.row(ch * kernel + j);
                        for (o, s) in src.iter().enumerate() {
                            let pos = (o * stride + j) as isize - *pad as isize;
                            if pos >= 0 && (pos as usize) < l {
                                g.data[ch * l + pos as usize] += s;
                            }
                        }
                    }
                }
                debug_assert_eq!(lout, (l + 2 * pad - kernel) / stride + 1);
                self.accumulate(grads, *x, g);
            }
            Op::Upsample2(a) => {
                let (c, l) = self.value(*a).shape();
                let mut g = Tensor::zeros(c, l);
                for ch in 0..c {
                    for j in 0..2 * l {
                        let (i0, w0, i1, w1) = upsample_taps(j, l);
                        let gv = gy.data[ch * 2 * l + j];
                        g.data[ch * l + i0] += w0 * gv;
                        g.data[ch * l + i1] += w1 * gv;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows;
                let split = ra * gy.cols;
                let ga = Tensor::from_vec(ra, gy.cols, gy.data[..split].to_vec());
                let gb = Tensor::from_vec(gy.rows - ra, gy.cols, gy.data[split..].to_vec());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.rg(*p) {
                        let mut g = Tensor::zeros(gy.rows, w);
                        for r in 0..gy.rows {
                            g.data[r * w..(r + 1) * w].copy_from_slice(&gy.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, *p, g);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let mut g = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    g.data[r * cols + start..r * cols + start + gy.cols].copy_from_slice(gy.row(r));
                }
                self.accumulate(grads, *x, g);
            }
            Op::PadCols(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    g.data[r * cols..(r + 1) * cols].copy_from_slice(&gy.row(r)[..cols]);
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.rows, x.cols, gy.data[0]));
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Tensor::zeros(rows, cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, v) in g.data[r * cols..(r + 1) * cols].iter_mut().zip(&gy.data) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, *a, g);
            }
        }
    }
}
