//! Multi-level mask decoder.
//!
//! One cross-attention block per encoder level reads the prompted query
//! tokens against keys and values built from the support-mask-gated level
//! embeddings. The block outputs are concatenated along channels and mapped
//! to a per-pixel logit by a small convolutional head, then bilinearly
//! upsampled to image resolution.

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Var};
use crate::nn::{self, Attended, Init};
use crate::params::Binder;
use crate::tensor::Tensor;

/// Which levels feed the fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    /// All four levels in parallel.
    MultiLevel,
    /// Level 4 only.
    SingleLevel,
}

impl DecoderMode {
    /// 1-based level indices used by this mode.
    pub fn levels(self) -> &'static [usize] {
        match self {
            DecoderMode::MultiLevel => &[1, 2, 3, 4],
            DecoderMode::SingleLevel => &[4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::MultiLevel => "mlmd",
            DecoderMode::SingleLevel => "single",
        }
    }
}

pub fn init_params(init: &mut Init, c: usize, mode: DecoderMode) {
    for &l in mode.levels() {
        let p = format!("decoder.level{l}");
        init.linear(&format!("{p}.key"), c, c, false, false);
        init.linear(&format!("{p}.value"), c, c, false, false);
        init.layer_norm(&format!("{p}.ln_q"), c);
        init.linear(&format!("{p}.query"), c, c, true, false);
        init.linear(&format!("{p}.out"), c, c, true, true);
        init.layer_norm(&format!("{p}.ln_mlp"), c);
        init.mlp(&format!("{p}.mlp"), c, 4 * c, true);
    }
    let n = mode.levels().len();
    init.conv("decoder.head.conv1", n * c, c, 1);
    init.conv("decoder.head.conv2", c, c, 3);
    init.conv("decoder.head.conv3", c, 1, 1);
}

/// Broadcasts an `h×w` mask over the channels of `(h·w)×c` tokens.
pub fn gate(b: &Binder, tokens: Var, mask: &Tensor) -> Result<Var> {
    let shape = b.g.shape(tokens);
    if mask.numel() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "gate_level",
            lhs: shape,
            rhs: mask.shape().to_vec(),
        });
    }
    let c = shape[1];
    let m = b.g.constant(Tensor::from_fn(&shape, |i| mask.data()[i / c]))?;
    b.g.mul(tokens, m)
}

/// Key input for level `l`: the projected product of mask and level embedding.
pub fn gate_level(b: &Binder, level_tokens: Var, mask: &Tensor, level: usize) -> Result<Var> {
    let gated = gate(b, level_tokens, mask)?;
    nn::linear(b, gated, &format!("decoder.level{level}.key"))
}

/// Cross-attention plus MLP for one level; returns the block output and the
/// attention weights.
pub fn level_block(
    b: &Binder,
    prompted: Var,
    level_tokens: Var,
    mask: &Tensor,
    level: usize,
    heads: usize,
) -> Result<(Var, Attended)> {
    let p = format!("decoder.level{level}");
    if b.g.shape(prompted) != b.g.shape(level_tokens) {
        return Err(Error::ShapeMismatch {
            op: "level_block",
            lhs: b.g.shape(prompted),
            rhs: b.g.shape(level_tokens),
        });
    }
    let gated = gate(b, level_tokens, mask)?;
    let k = nn::linear(b, gated, &format!("{p}.key"))?;
    let v = nn::linear(b, gated, &format!("{p}.value"))?;
    let qn = nn::layer_norm(b, prompted, &format!("{p}.ln_q"))?;
    let q = nn::linear(b, qn, &format!("{p}.query"))?;
    let att = nn::multi_head(b, q, k, v, heads)?;
    let proj = nn::linear(b, att.out, &format!("{p}.out"))?;
    let x = b.g.add(prompted, proj)?;
    let h = nn::layer_norm(b, x, &format!("{p}.ln_mlp"))?;
    let m = nn::mlp(b, h, &format!("{p}.mlp"))?;
    Ok((b.g.add(x, m)?, att))
}

/// `out×in` bilinear interpolation matrix with half-pixel centers and edge clamping.
pub fn bilinear_matrix(out: usize, inp: usize) -> Tensor {
    let mut m = Tensor::zeros(&[out, inp]);
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let t = src - lo as f64;
        m.set2(i, lo, m.at2(i, lo) + 1.0 - t);
        m.set2(i, hi, m.at2(i, hi) + t);
    }
    m
}

/// Bilinear resize of an `h×w` map to `out_h×out_w`.
pub fn upsample(b: &Binder, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let s = b.g.shape(x);
    let ry = b.g.constant(bilinear_matrix(out_h, s[0]))?;
    let rxt = b.g.constant(bilinear_matrix(out_w, s[1]).transpose())?;
    let y = b.g.matmul(ry, x)?;
    b.g.matmul(y, rxt)
}

/// Concatenates the level outputs along channels and runs the classification
/// head. Returns `1×H×W` logits.
pub fn fuse_and_classify(b: &Binder, outs: &[Var], grid: usize, image_size: usize) -> Result<Var> {
    let n_in = b.p("decoder.head.conv1.weight")?;
    let expected = b.g.shape(n_in)[1];
    let c = b.g.shape(outs.first().copied().ok_or_else(|| {
        Error::InvalidArgument("fuse_and_classify needs at least one level".into())
    })?)[1];
    if outs.len() * c != expected {
        return Err(Error::InvalidArgument(format!(
            "head expects {expected} channels, got {} levels of {c}",
            outs.len()
        )));
    }
    let chw: Vec<Var> = outs
        .iter()
        .map(|&o| b.g.transpose(o))
        .collect::<Result<_>>()?;
    let cat = if chw.len() == 1 {
        chw[0]
    } else {
        b.g.concat_rows(&chw)?
    };
    let x = b.g.reshape(cat, &[outs.len() * c, grid, grid])?;
    let x = nn::conv(b, x, "decoder.head.conv1", 1)?;
    let x = b.g.gelu(x)?;
    let x = nn::conv(b, x, "decoder.head.conv2", 1)?;
    let x = b.g.gelu(x)?;
    let x = nn::conv(b, x, "decoder.head.conv3", 1)?;
    let x = b.g.reshape(x, &[grid, grid])?;
    let up = upsample(b, x, image_size, image_size)?;
    b.g.reshape(up, &[1, image_size, image_size])
}

/// `sigmoid(logit) > threshold`, as a `{0, 1}` map shaped like the logits.
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|z| if sigmoid(z) > threshold { 1.0 } else { 0.0 })
}
