//! Miniature ViT encoder with a frozen backbone and per-layer adapters.
//!
//! Each layer's input is the previous layer's output plus an adapter term
//! computed from the high-frequency image content and the patch embedding:
//!
//! ```text
//! F_A^i = up(GELU(down_i(F_hfc + F_pe)))
//! F^i   = E^{i-1} + F_A^i
//! E^i   = layer_i(F^i)
//! ```
//!
//! `up` is a single projection shared by all layers and starts at zero, so an
//! untrained encoder reproduces the plain backbone exactly.

use crate::error::{Error, Result};
use crate::fft::{centered_frequency, fft2, ifft2};
use crate::graph::Var;
use crate::nn::{self, Init};
use crate::params::Binder;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub adapter_dim: usize,
    pub hfc_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 12,
            num_heads: 4,
            adapter_dim: 16,
            hfc_ratio: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !self.image_size.is_power_of_two() {
            return bad("image_size must be a power of two");
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.num_layers == 0 || (self.num_layers >= 4 && !self.num_layers.is_multiple_of(4)) {
            return bad("num_layers must be a multiple of 4 (or 1..=3 for miniature checks)");
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.adapter_dim == 0 {
            return bad("adapter_dim must be positive");
        }
        if !(self.hfc_ratio > 0.0 && self.hfc_ratio < 1.0) {
            return bad("hfc_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// 1-based layer indices after which the four feature levels are taken.
    pub fn level_layers(&self) -> [usize; 4] {
        let l = self.num_layers;
        [1, 2, 3, 4].map(|j| (j * l).div_ceil(4))
    }
}

/// The four sub-block outputs for one image, as `(h·w)×c` token matrices.
#[derive(Clone, Debug)]
pub struct MultiLevelFeatures {
    pub levels: [Var; 4],
    pub grid: usize,
}

/// Zeroes the centered `τH×τW` low-frequency band and returns the real part
/// of the inverse transform, shaped like the input.
pub fn extract_hfc(image: &Tensor, ratio: f64) -> Result<Tensor> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "high-frequency ratio {ratio} outside (0, 1)"
        )));
    }
    let mut spec = fft2(image)?;
    let (h, w) = (spec.h, spec.w);
    let half_h = ratio * h as f64 / 2.0;
    let half_w = ratio * w as f64 / 2.0;
    for r in 0..h {
        let fr = centered_frequency(r, h).unsigned_abs() as f64;
        if fr >= half_h {
            continue;
        }
        for c in 0..w {
            let fc = centered_frequency(c, w).unsigned_abs() as f64;
            if fc < half_w {
                spec.data[r * w + c] = crate::fft::Complex::ZERO;
            }
        }
    }
    ifft2(&spec)?.reshape(image.shape())
}

pub fn init_params(init: &mut Init, cfg: &EncoderConfig) {
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    init.conv("encoder.backbone.patch", 1, c, p);
    init.normal("encoder.backbone.pos", &[cfg.num_tokens(), c], 1.0 / (c as f64).sqrt());
    for i in 1..=cfg.num_layers {
        nn::init_transformer_block(init, &format!("encoder.backbone.layer{i}"), c, false);
    }
    init.conv("encoder.adapter.hfc_conv", 1, c, p);
    init.linear("encoder.adapter.hfc_proj", c, c, true, false);
    for i in 1..=cfg.num_layers {
        init.linear(
            &format!("encoder.adapter.down{i}"),
            c,
            cfg.adapter_dim,
            true,
            false,
        );
    }
    init.linear("encoder.adapter.up", cfg.adapter_dim, c, true, true);
}

/// Stateless view over the encoder's parameters in a [`Binder`].
pub struct Encoder<'a> {
    pub cfg: &'a EncoderConfig,
}

impl<'a> Encoder<'a> {
    pub fn new(cfg: &'a EncoderConfig) -> Self {
        Self { cfg }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.cfg.image_size;
        if image.shape() != [1, n, n] {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                lhs: image.shape().to_vec(),
                rhs: vec![1, n, n],
            });
        }
        Ok(())
    }

    /// Non-overlapping patch projection plus positional term, as `(h·w)×c` tokens.
    pub fn patch_embed(&self, b: &Binder, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let x = b.g.constant(image.clone())?;
        let e = nn::conv(b, x, "encoder.backbone.patch", self.cfg.patch_size)?;
        let tokens = nn::chw_to_tokens(b, e)?;
        b.g.add(tokens, b.p("encoder.backbone.pos")?)
    }

    /// Projected high-frequency features `F_hfc`, `(h·w)×c`.
    pub fn hfc_features(&self, b: &Binder, image: &Tensor) -> Result<Var> {
        let hfc = extract_hfc(image, self.cfg.hfc_ratio)?;
        let x = b.g.constant(hfc)?;
        let f = nn::conv(b, x, "encoder.adapter.hfc_conv", self.cfg.patch_size)?;
        let tokens = nn::chw_to_tokens(b, f)?;
        nn::linear(b, tokens, "encoder.adapter.hfc_proj")
    }

    /// `F_A^i` for 1-based layer `i`, given `F_hfc + F_pe`.
    pub fn adapter(&self, b: &Binder, input: Var, layer: usize) -> Result<Var> {
        let h = nn::linear(b, input, &format!("encoder.adapter.down{layer}"))?;
        let h = b.g.gelu(h)?;
        nn::linear(b, h, "encoder.adapter.up")
    }

    /// Adapter output from separate `F_hfc` and `F_pe` inputs.
    pub fn adapter_forward(&self, b: &Binder, f_hfc: Var, f_pe: Var, layer: usize) -> Result<Var> {
        if b.g.shape(f_hfc) != b.g.shape(f_pe) {
            return Err(Error::ShapeMismatch {
                op: "adapter_forward",
                lhs: b.g.shape(f_hfc),
                rhs: b.g.shape(f_pe),
            });
        }
        let input = b.g.add(f_hfc, f_pe)?;
        self.adapter(b, input, layer)
    }

    /// Frozen transformer layer `i` (1-based).
    pub fn layer(&self, b: &Binder, x: Var, layer: usize) -> Result<Var> {
        nn::transformer_block(
            b,
            x,
            &format!("encoder.backbone.layer{layer}"),
            self.cfg.num_heads,
        )
    }

    /// Every layer output `E^1..E^L`, with adapters.
    pub fn encode_traced(&self, b: &Binder, image: &Tensor) -> Result<Vec<Var>> {
        let e0 = self.patch_embed(b, image)?;
        let f_hfc = self.hfc_features(b, image)?;
        let adapter_in = b.g.add(f_hfc, e0)?;
        let mut x = e0;
        let mut outs = Vec::with_capacity(self.cfg.num_layers);
        for i in 1..=self.cfg.num_layers {
            let fa = self.adapter(b, adapter_in, i)?;
            let f = b.g.add(x, fa)?;
            x = self.layer(b, f, i)?;
            outs.push(x);
        }
        Ok(outs)
    }

    pub fn encode(&self, b: &Binder, image: &Tensor) -> Result<MultiLevelFeatures> {
        let outs = self.encode_traced(b, image)?;
        Ok(self.levels_from(&outs))
    }

    /// The adapter-free backbone, for comparison against [`Encoder::encode`].
    pub fn backbone_forward(&self, b: &Binder, image: &Tensor) -> Result<MultiLevelFeatures> {
        let mut x = self.patch_embed(b, image)?;
        let mut outs = Vec::with_capacity(self.cfg.num_layers);
        for i in 1..=self.cfg.num_layers {
            x = self.layer(b, x, i)?;
            outs.push(x);
        }
        Ok(self.levels_from(&outs))
    }

    fn levels_from(&self, outs: &[Var]) -> MultiLevelFeatures {
        MultiLevelFeatures {
            levels: self.cfg.level_layers().map(|l| outs[l - 1]),
            grid: self.cfg.grid(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), 8);
        assert_eq!(cfg.level_layers(), [3, 6, 9, 12]);
    }

    #[test]
    fn miniature_level_layers() {
        let cfg = EncoderConfig {
            num_layers: 2,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.level_layers(), [1, 1, 2, 2]);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad = [
            EncoderConfig {
                image_size: 48,
                ..Default::default()
            },
            EncoderConfig {
                num_layers: 6,
                ..Default::default()
            },
            EncoderConfig {
                num_heads: 3,
                ..Default::default()
            },
            EncoderConfig {
                hfc_ratio: 1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn hfc_rejects_bad_ratio() {
        let img = Tensor::zeros(&[1, 8, 8]);
        assert!(extract_hfc(&img, 0.0).is_err());
        assert!(extract_hfc(&img, 1.5).is_err());
    }

    #[test]
    fn hfc_removes_constant() {
        let img = Tensor::full(&[1, 16, 16], 0.37);
        let out = extract_hfc(&img, 0.25).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16]);
        assert!(out.data().iter().all(|v| v.abs() < 1e-9));
    }
}
