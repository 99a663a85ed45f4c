//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed through it in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and accumulates adjoints. Nodes whose inputs never touch a
//! gradient-tracking leaf are marked as constants and skipped on the way back,
//! so frozen weights cost nothing beyond their forward use.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    AddRowVector(Var, Var),
    AddColVector(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Same padding for stride 1 (odd kernels), valid padding otherwise.
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 || w_shape[1] != x_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, k) = (w_shape[0], w_shape[2]);
        if w_shape[3] != k || k > h || k > w || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let pad = if stride == 1 { (k - 1) / 2 } else { 0 };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Unfold `x` into a (c_in·k·k) × (oh·ow) patch matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kk = self.k * self.k;
        let npos = self.oh * self.ow;
        let mut cols = vec![0.0; self.c_in * kk * npos];
        for ci in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * kk + ki * self.k + kj) * npos;
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            cols[row + oi * self.ow + oj] =
                                x[(ci * self.h + ii as usize) * self.w + jj as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let kk = self.k * self.k;
        let npos = self.oh * self.ow;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * kk + ki * self.k + kj) * npos;
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            x[(ci * self.h + ii as usize) * self.w + jj as usize] +=
                                cols[row + oi * self.ow + oj];
                        }
                    }
                }
            }
        }
        x
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A single-threaded operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A gradient-tracking leaf.
    pub fn variable(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "leaf")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let data = gemm(
                ta.data(),
                ta.rows(),
                ta.cols(),
                false,
                tb.data(),
                tb.rows(),
                tb.cols(),
                false,
            );
            Tensor::new(&[ta.rows(), tb.cols()], data)?
        };
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]), "matmul")
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.is_scalar() {
            Ok(Broadcast::RhsScalar)
        } else if ta.is_scalar() {
            Ok(Broadcast::LhsScalar)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            match kind {
                Broadcast::Same => ta.zip_map(tb, &f),
                Broadcast::RhsScalar => {
                    let s = tb.item();
                    ta.map(|x| f(x, s))
                }
                Broadcast::LhsScalar => {
                    let s = ta.item();
                    tb.map(|x| f(s, x))
                }
            }
        };
        self.push(out, op, self.rg(&[a, b]), name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.map(f);
        self.push(out, op, self.rg(&[a]), name)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::NumericFault {
                op: "sqrt",
                detail: format!("negative input {x}"),
            });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if axis >= t.rank() {
                return Err(Error::InvalidArgument(format!(
                    "softmax axis {axis} out of range for rank {}",
                    t.rank()
                )));
            }
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let src = t.data();
            let mut dst = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let m = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (src[at(j)] - m).exp();
                        dst[at(j)] = e;
                        z += e;
                    }
                    for j in 0..n {
                        dst[at(j)] /= z;
                    }
                }
            }
            Tensor::new(t.shape(), dst)?
        };
        self.push(out, Op::Softmax { x, axis }, self.rg(&[x]), "softmax")
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let n = *t.shape().last().ok_or_else(|| {
                Error::InvalidArgument("layer_norm needs rank >= 1".into())
            })?;
            if g.shape() != [n] || b.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let rows = t.numel() / n;
            let mut xhat = vec![0.0; t.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.data()[r * n..(r + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..n {
                    let xh = (row[j] - mu) * inv;
                    xhat[r * n + j] = xh;
                    out[r * n + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(t.shape(), out)?, xhat, inv_std)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            self.rg(&[x, gain, bias]),
            "layer_norm",
        )
    }

    /// Cross-correlation of a `c_in×h×w` input with `c_out×c_in×k×k` kernels.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (out, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeom::new(tx.shape(), tw.shape(), stride)?;
            let cols = geom.im2col(tx.data());
            let kdim = geom.c_in * geom.k * geom.k;
            let npos = geom.oh * geom.ow;
            let data = gemm(tw.data(), geom.c_out, kdim, false, &cols, kdim, npos, false);
            (
                Tensor::new(&[geom.c_out, geom.oh, geom.ow], data)?,
                geom,
                cols,
            )
        };
        self.push(out, Op::Conv2d { x, w, geom, cols }, self.rg(&[x, w]), "conv2d")
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), self.rg(&[x]), "reshape")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 {
                return Err(Error::InvalidArgument("transpose needs a matrix".into()));
            }
            t.transpose()
        };
        self.push(out, Op::Transpose(x), self.rg(&[x]), "transpose")
    }

    /// `x (n×m) + b[m]` broadcast over rows.
    pub fn add_row_vector(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, v) = (&nodes[x.0].value, &nodes[b.0].value);
            if t.rank() != 2 || v.shape() != [t.cols()] {
                return Err(Error::ShapeMismatch {
                    op: "add_row_vector",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            let m = t.cols();
            Tensor::from_fn(t.shape(), |i| t.data()[i] + v.data()[i % m])
        };
        self.push(out, Op::AddRowVector(x, b), self.rg(&[x, b]), "add_row_vector")
    }

    /// `x (n×m) + b[n]` broadcast over columns.
    pub fn add_col_vector(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (t, v) = (&nodes[x.0].value, &nodes[b.0].value);
            if t.rank() != 2 || v.shape() != [t.rows()] {
                return Err(Error::ShapeMismatch {
                    op: "add_col_vector",
                    lhs: t.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            let m = t.cols();
            Tensor::from_fn(t.shape(), |i| t.data()[i] + v.data()[i / m])
        };
        self.push(out, Op::AddColVector(x, b), self.rg(&[x, b]), "add_col_vector")
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 || start + len > t.cols() || len == 0 {
                return Err(Error::InvalidArgument(format!(
                    "slice_cols {start}..{} of {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let m = t.cols();
            Tensor::from_fn(&[t.rows(), len], |i| {
                t.data()[(i / len) * m + start + i % len]
            })
        };
        self.push(out, Op::SliceCols { x, start }, self.rg(&[x]), "slice_cols")
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = xs.iter().map(|v| &nodes[v.0].value).collect();
            let rows = ts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?
                .shape()[0];
            for t in &ts {
                if t.rank() != 2 || t.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: ts[0].shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
            let total: usize = ts.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in &ts {
                    let m = t.cols();
                    data.extend_from_slice(&t.data()[r * m..(r + 1) * m]);
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        self.push(out, Op::ConcatCols(xs.to_vec()), self.rg(xs), "concat_cols")
    }

    pub fn concat_rows(&self, xs: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = xs.iter().map(|v| &nodes[v.0].value).collect();
            let cols = ts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?
                .cols();
            for t in &ts {
                if t.rank() != 2 || t.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: ts[0].shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
            let rows: usize = ts.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in &ts {
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[rows, cols], data)?
        };
        self.push(out, Op::ConcatRows(xs.to_vec()), self.rg(xs), "concat_rows")
    }

    /// Gathers the listed columns of a matrix, in order.
    pub fn select_cols(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 || idx.is_empty() || idx.iter().any(|&j| j >= t.cols()) {
                return Err(Error::InvalidArgument(format!(
                    "select_cols {idx:?} of {:?}",
                    t.shape()
                )));
            }
            let (m, k) = (t.cols(), idx.len());
            Tensor::from_fn(&[t.rows(), k], |i| t.data()[(i / k) * m + idx[i % k]])
        };
        self.push(
            out,
            Op::SelectCols {
                x,
                idx: idx.to_vec(),
            },
            self.rg(&[x]),
            "select_cols",
        )
    }

    /// Pairwise squared Euclidean distances between the columns of
    /// `a (d×n)` and `b (d×m)`, as an `n×m` matrix.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
                return Err(Error::ShapeMismatch {
                    op: "sq_dist",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let (d, n, m) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; n * m];
            for k in 0..d {
                let ra = &ta.data()[k * n..(k + 1) * n];
                let rb = &tb.data()[k * m..(k + 1) * m];
                for p in 0..n {
                    for i in 0..m {
                        let diff = ra[p] - rb[i];
                        out[p * m + i] += diff * diff;
                    }
                }
            }
            Tensor::new(&[n, m], out)?
        };
        self.push(out, Op::SqDist(a, b), self.rg(&[a, b]), "sq_dist")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(&shape));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let want = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if want(*a) {
                        let g = gemm(
                            dy.data(),
                            dy.rows(),
                            dy.cols(),
                            false,
                            tb.data(),
                            tb.rows(),
                            tb.cols(),
                            true,
                        );
                        acc(&mut grads, *a, Tensor::new(ta.shape(), g)?);
                    }
                    if want(*b) {
                        let g = gemm(
                            ta.data(),
                            ta.rows(),
                            ta.cols(),
                            true,
                            dy.data(),
                            dy.rows(),
                            dy.cols(),
                            false,
                        );
                        acc(&mut grads, *b, Tensor::new(tb.shape(), g)?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if want(*a) {
                        acc(&mut grads, *a, reduce_to(&dy, val(*a)));
                    }
                    if want(*b) {
                        acc(&mut grads, *b, reduce_to(&dy.map(|g| g * sign), val(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if want(*a) {
                        acc(&mut grads, *a, reduce_to(&mul_bcast(&dy, tb, |g, y| g * y), ta));
                    }
                    if want(*b) {
                        acc(&mut grads, *b, reduce_to(&mul_bcast(&dy, ta, |g, x| g * x), tb));
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if want(*a) {
                        acc(&mut grads, *a, reduce_to(&mul_bcast(&dy, tb, |g, y| g / y), ta));
                    }
                    if want(*b) {
                        // d(a/b)/db = -out/b
                        let q = mul_bcast(&node.value, tb, |o, y| -o / y);
                        acc(&mut grads, *b, reduce_to(&dy.zip_map(&q, |g, q| g * q), tb));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.map(|g| g * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, dy),
                Op::Exp(a) => acc(&mut grads, *a, dy.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(&mut grads, *a, dy.zip_map(val(*a), |g, x| g / x)),
                Op::Sqrt(a) => acc(&mut grads, *a, dy.zip_map(&node.value, |g, y| 0.5 * g / y)),
                Op::Gelu(a) => acc(&mut grads, *a, dy.zip_map(val(*a), |g, x| g * gelu_grad(x))),
                Op::Relu(a) => acc(&mut grads, *a,
                    dy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Sigmoid(a) => acc(&mut grads, *a, dy.zip_map(&node.value, |g, s| g * s * (1.0 - s))),
                Op::Clamp(a, lo, hi) => acc(&mut grads, *a,
                    dy.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
                ),
                Op::Sum(a) => acc(&mut grads, *a, Tensor::full(val(*a).shape(), dy.item())),
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis);
                    let mut dx = vec![0.0; y.numel()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let dot: f64 = (0..n).map(|j| dy.data()[at(j)] * y.data()[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y.data()[at(j)] * (dy.data()[at(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape(), dx)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = val(*gain);
                    let n = g.numel();
                    let rows = inv_std.len();
                    if want(*gain) {
                        let mut dg = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                dg[j] += dy.data()[r * n + j] * xhat[r * n + j];
                            }
                        }
                        acc(&mut grads, *gain, Tensor::new(&[n], dg)?);
                    }
                    if want(*bias) {
                        let mut db = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                db[j] += dy.data()[r * n + j];
                            }
                        }
                        acc(&mut grads, *bias, Tensor::new(&[n], db)?);
                    }
                    if want(*x) {
                        let mut dx = vec![0.0; rows * n];
                        let nf = n as f64;
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                let dxh = dy.data()[r * n + j] * g.data()[j];
                                s1 += dxh;
                                s2 += dxh * xhat[r * n + j];
                            }
                            for j in 0..n {
                                let dxh = dy.data()[r * n + j] * g.data()[j];
                                dx[r * n + j] =
                                    inv_std[r] / nf * (nf * dxh - s1 - xhat[r * n + j] * s2);
                            }
                        }
                        acc(&mut grads, *x, Tensor::new(val(*x).shape(), dx)?);
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let kdim = geom.c_in * geom.k * geom.k;
                    let npos = geom.oh * geom.ow;
                    if want(*w) {
                        let g = gemm(dy.data(), geom.c_out, npos, false, cols, kdim, npos, true);
                        acc(&mut grads, *w, Tensor::new(val(*w).shape(), g)?);
                    }
                    if want(*x) {
                        let dcols = gemm(
                            val(*w).data(),
                            geom.c_out,
                            kdim,
                            true,
                            dy.data(),
                            geom.c_out,
                            npos,
                            false,
                        );
                        acc(&mut grads, *x, Tensor::new(val(*x).shape(), geom.col2im(&dcols))?);
                    }
                }
                Op::Reshape(a) => acc(&mut grads, *a, dy.reshape(val(*a).shape())?),
                Op::Transpose(a) => acc(&mut grads, *a, dy.transpose()),
                Op::AddRowVector(x, b) => {
                    if want(*b) {
                        let m = dy.cols();
                        let mut db = vec![0.0; m];
                        for (k, g) in dy.data().iter().enumerate() {
                            db[k % m] += g;
                        }
                        acc(&mut grads, *b, Tensor::new(&[m], db)?);
                    }
                    if want(*x) {
                        acc(&mut grads, *x, dy);
                    }
                }
                Op::AddColVector(x, b) => {
                    if want(*b) {
                        let m = dy.cols();
                        let db: Vec<f64> = dy.data().chunks(m).map(|r| r.iter().sum()).collect();
                        acc(&mut grads, *b, Tensor::new(&[dy.rows()], db)?);
                    }
                    if want(*x) {
                        acc(&mut grads, *x, dy);
                    }
                }
                Op::SliceCols { x, start } => {
                    let src = val(*x);
                    let (m, len) = (src.cols(), dy.cols());
                    let mut dx = Tensor::zeros(src.shape());
                    for r in 0..dy.rows() {
                        for j in 0..len {
                            dx.data_mut()[r * m + start + j] = dy.data()[r * len + j];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(xs) => {
                    let total = dy.cols();
                    let mut off = 0;
                    for v in xs {
                        let m = val(*v).cols();
                        if want(*v) {
                            let g = Tensor::from_fn(val(*v).shape(), |i| {
                                dy.data()[(i / m) * total + off + i % m]
                            });
                            acc(&mut grads, *v, g);
                        }
                        off += m;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for v in xs {
                        let n = val(*v).numel();
                        if want(*v) {
                            let g = Tensor::new(val(*v).shape(), dy.data()[off..off + n].to_vec())?;
                            acc(&mut grads, *v, g);
                        }
                        off += n;
                    }
                }
                Op::SelectCols { x, idx } => {
                    let src = val(*x);
                    let (m, k) = (src.cols(), idx.len());
                    let mut dx = Tensor::zeros(src.shape());
                    for r in 0..dy.rows() {
                        for (j, &col) in idx.iter().enumerate() {
                            dx.data_mut()[r * m + col] += dy.data()[r * k + j];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SqDist(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (d, n, m) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = vec![0.0; d * n];
                    let mut db = vec![0.0; d * m];
                    for k in 0..d {
                        for p in 0..n {
                            for i in 0..m {
                                let t = 2.0 * dy.data()[p * m + i]
                                    * (ta.data()[k * n + p] - tb.data()[k * m + i]);
                                da[k * n + p] += t;
                                db[k * m + i] -= t;
                            }
                        }
                    }
                    if want(*a) {
                        acc(&mut grads, *a, Tensor::new(ta.shape(), da)?);
                    }
                    if want(*b) {
                        acc(&mut grads, *b, Tensor::new(tb.shape(), db)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Elementwise `f(g, other)` where `other` may be a broadcast scalar.
fn mul_bcast(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, f)
    } else {
        let s = other.item();
        g.map(|x| f(x, s))
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let g = Graph::new();
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = g.constant(Tensor::eye(3)).unwrap();
        let bv = g.constant(b.clone()).unwrap();
        let out = g.matmul(i3, bv).unwrap();
        assert_eq!(*g.value(out), b);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let out = g.matmul(a, z).unwrap();
        assert_eq!(*g.value(out), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_identities() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let zero = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.add(x, zero).unwrap();
        assert_eq!(*g.value(y), *g.value(x));

        let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let e = g.exp(z).unwrap();
        assert_eq!(*g.value(e), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn sqrt_of_negative_faults() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, -1.0])).unwrap();
        assert!(matches!(g.sqrt(x), Err(Error::NumericFault { .. })));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2])).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let g = Graph::new();
        assert!(g.constant(t(&[1], &[f64::INFINITY])).is_err());
        let x = g.constant(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NumericFault { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let g = Graph::new();
        let u = g.constant(Tensor::full(&[2, 4], 3.0)).unwrap();
        let s = g.softmax(u, 1).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = g.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.data()[0] - 0.25).abs() < 1e-15);
        assert!((v.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let g = Graph::new();
        let gain = g.constant(Tensor::ones(&[2])).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        let c = g.constant(Tensor::full(&[1, 2], 7.0)).unwrap();
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = g.value(y);
        assert!((v.data()[0] + expect).abs() < 1e-15);
        assert!((v.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn conv2d_closed_forms() {
        let g = Graph::new();
        let img = Tensor::from_fn(&[1, 5, 5], |i| i as f64);
        let x = g.constant(img.clone()).unwrap();
        let k1 = g.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let y = g.conv2d(x, k1, 1).unwrap();
        assert_eq!(*g.value(y), img);

        let c = g.constant(Tensor::full(&[1, 6, 6], 2.5)).unwrap();
        let k3 = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = g.conv2d(c, k3, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 6, 6]);
        assert!((v.at3(0, 2, 3) - 9.0 * 2.5).abs() < 1e-12);
        // corner sees four in-bounds taps under zero padding
        assert!((v.at3(0, 0, 0) - 4.0 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_sum_gradient() {
        let g = Graph::new();
        let xt = t(&[3], &[1.0, 2.0, 3.0]);
        let yt = t(&[3], &[-1.0, 0.5, 4.0]);
        let x = g.variable(xt).unwrap();
        let y = g.constant(yt.clone()).unwrap();
        let theta = g.variable(Tensor::scalar(2.0)).unwrap();
        let p = g.mul(x, y).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &yt);
        assert!(grads.get(theta).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
