//! Layer building blocks shared by the encoder, prompt encoder, and decoder.
//!
//! Linear maps use the row convention `y = x·W + b` with `W: in×out`, so token
//! sequences are `n×c` matrices with one token per row.

use crate::error::Result;
use crate::graph::Var;
use crate::params::{normal, Binder, Param, ParamStore, FROZEN_PREFIX};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

fn param_for(name: &str, value: Tensor) -> Param {
    if name.starts_with(FROZEN_PREFIX) {
        Param::frozen(value)
    } else {
        Param::trainable(value)
    }
}

/// Registers parameters, deciding trainability from the name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn tensor(&mut self, name: &str, value: Tensor) {
        let p = param_for(name, value);
        self.store.insert(name, p);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = normal(shape, std, self.rng);
        self.tensor(name, t);
    }

    /// `prefix.weight` (in×out) scaled by 1/sqrt(in), optional zero `prefix.bias`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool, zero: bool) {
        let w = format!("{prefix}.weight");
        if zero {
            self.tensor(&w, Tensor::zeros(&[d_in, d_out]));
        } else {
            self.normal(&w, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        }
        if bias {
            self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, n: usize) {
        self.tensor(&format!("{prefix}.gain"), Tensor::ones(&[n]));
        self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[n]));
    }

    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = c_in * k * k;
        self.normal(
            &format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            1.0 / (fan_in as f64).sqrt(),
        );
        self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    /// Query/key/value/output projections; `zero_out` zeroes the output map.
    pub fn attention(&mut self, prefix: &str, c: usize, zero_out: bool) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), c, c, true, false);
        }
        self.linear(&format!("{prefix}.out"), c, c, true, zero_out);
    }

    pub fn mlp(&mut self, prefix: &str, c: usize, hidden: usize, zero_out: bool) {
        self.linear(&format!("{prefix}.fc1"), c, hidden, true, false);
        self.linear(&format!("{prefix}.fc2"), hidden, c, true, zero_out);
    }
}

pub fn linear(b: &Binder, x: Var, prefix: &str) -> Result<Var> {
    let w = b.p(&format!("{prefix}.weight"))?;
    let y = b.g.matmul(x, w)?;
    match b.store().get(&format!("{prefix}.bias")) {
        Some(_) => b.g.add_row_vector(y, b.p(&format!("{prefix}.bias"))?),
        None => Ok(y),
    }
}

pub fn layer_norm(b: &Binder, x: Var, prefix: &str) -> Result<Var> {
    let gain = b.p(&format!("{prefix}.gain"))?;
    let bias = b.p(&format!("{prefix}.bias"))?;
    b.g.layer_norm(x, gain, bias, LN_EPS)
}

/// Conv with per-channel bias on a `c×h×w` map.
pub fn conv(b: &Binder, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let y = b.g.conv2d(x, b.p(&format!("{prefix}.weight"))?, stride)?;
    let shape = b.g.shape(y);
    let flat = b.g.reshape(y, &[shape[0], shape[1] * shape[2]])?;
    let flat = b.g.add_col_vector(flat, b.p(&format!("{prefix}.bias"))?)?;
    b.g.reshape(flat, &shape)
}

pub fn mlp(b: &Binder, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(b, x, &format!("{prefix}.fc1"))?;
    let h = b.g.gelu(h)?;
    linear(b, h, &format!("{prefix}.fc2"))
}

/// Output of [`multi_head`]: concatenated head outputs and per-head weights.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over pre-projected `q (n×c)`, `k`, `v (m×c)`.
pub fn multi_head(b: &Binder, q: Var, k: Var, v: Var, heads: usize) -> Result<Attended> {
    let c = b.g.shape(q)[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = b.g.slice_cols(q, h * d, d)?;
        let kh = b.g.slice_cols(k, h * d, d)?;
        let vh = b.g.slice_cols(v, h * d, d)?;
        let kt = b.g.transpose(kh)?;
        let scores = b.g.scale(b.g.matmul(qh, kt)?, scale)?;
        let a = b.g.softmax(scores, 1)?;
        outs.push(b.g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        b.g.concat_cols(&outs)?
    };
    Ok(Attended { out, weights })
}

/// Projects `x_q` and `x_kv` through `prefix.{q,k,v}`, attends, then applies `prefix.out`.
pub fn attention(b: &Binder, x_q: Var, x_kv: Var, prefix: &str, heads: usize) -> Result<Attended> {
    let q = linear(b, x_q, &format!("{prefix}.q"))?;
    let k = linear(b, x_kv, &format!("{prefix}.k"))?;
    let v = linear(b, x_kv, &format!("{prefix}.v"))?;
    let att = multi_head(b, q, k, v, heads)?;
    let out = linear(b, att.out, &format!("{prefix}.out"))?;
    Ok(Attended {
        out,
        weights: att.weights,
    })
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block(b: &Binder, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(b, x, &format!("{prefix}.ln1"))?;
    let a = attention(b, h, h, &format!("{prefix}.attn"), heads)?;
    let x = b.g.add(x, a.out)?;
    let h = layer_norm(b, x, &format!("{prefix}.ln2"))?;
    let m = mlp(b, h, &format!("{prefix}.mlp"))?;
    b.g.add(x, m)
}

pub fn init_transformer_block(init: &mut Init, prefix: &str, c: usize, zero_out: bool) {
    init.layer_norm(&format!("{prefix}.ln1"), c);
    init.attention(&format!("{prefix}.attn"), c, zero_out);
    init.layer_norm(&format!("{prefix}.ln2"), c);
    init.mlp(&format!("{prefix}.mlp"), c, 4 * c, zero_out);
}

/// `c×h×w` feature map as an `(h·w)×c` token matrix.
pub fn chw_to_tokens(b: &Binder, x: Var) -> Result<Var> {
    let s = b.g.shape(x);
    let flat = b.g.reshape(x, &[s[0], s[1] * s[2]])?;
    b.g.transpose(flat)
}

pub fn tokens_to_chw(b: &Binder, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = b.g.shape(x)[1];
    let t = b.g.transpose(x)?;
    b.g.reshape(t, &[c, h, w])
}
