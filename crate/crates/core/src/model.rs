//! End-to-end few-shot segmenter: encoder, prompt encoder, and decoder.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::decoder::{self, DecoderMode};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Init;
use crate::params::{Binder, ParamStore};
use crate::prompt::{self, AplConfig, VisualPrompts};
use crate::rng;
use crate::tensor::Tensor;

/// How visual prompts are formed from the support pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptStrategy {
    /// Adaptive superpixel clustering.
    Apl,
    /// No prompt encoder; query features go to the decoder untouched.
    NoPrompt,
    /// A single masked-average-pooling prototype.
    OnePrototype,
    /// `N_max` sampled foreground points with a sinusoidal code.
    PointPrompt,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::Apl,
        PromptStrategy::NoPrompt,
        PromptStrategy::OnePrototype,
        PromptStrategy::PointPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::Apl => "apl",
            PromptStrategy::NoPrompt => "nope",
            PromptStrategy::OnePrototype => "one-prototype",
            PromptStrategy::PointPrompt => "point",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PromptStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt strategy `{s}`")))
    }
}

impl FromStr for DecoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlmd" => Ok(DecoderMode::MultiLevel),
            "single" => Ok(DecoderMode::SingleLevel),
            _ => Err(Error::InvalidArgument(format!("unknown decoder mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationMode {
    pub prompt: PromptStrategy,
    pub decoder: DecoderMode,
}

impl Default for AblationMode {
    fn default() -> Self {
        Self {
            prompt: PromptStrategy::Apl,
            decoder: DecoderMode::MultiLevel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub apl: AplConfig,
    pub ablation: AblationMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.apl.validate()
    }
}

/// Intermediate results of one forward pass.
pub struct Forward {
    /// `1×H×W`
    pub logits: Var,
    pub query_levels: [Var; 4],
    pub prompted_levels: [Var; 4],
    pub prompts: Option<VisualPrompts>,
    /// Support mask at token resolution.
    pub grid_mask: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters. The encoder, prompt encoder, and decoder draw from
    /// separate streams so the frozen backbone depends only on `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let c = cfg.encoder.embed_dim;
        {
            let mut r = rng::stream(seed, 1);
            encoder::init_params(&mut Init { store: &mut params, rng: &mut r }, &cfg.encoder);
        }
        if cfg.ablation.prompt != PromptStrategy::NoPrompt {
            let mut r = rng::stream(seed, 2);
            prompt::init_params(&mut Init { store: &mut params, rng: &mut r }, c, &cfg.apl);
        }
        {
            let mut r = rng::stream(seed, 3);
            decoder::init_params(
                &mut Init { store: &mut params, rng: &mut r },
                c,
                cfg.ablation.decoder,
            );
        }
        Ok(Self { cfg, params })
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder::new(&self.cfg.encoder)
    }

    /// Support mask pooled to the token grid. A mask too thin to survive the
    /// 0.5 threshold falls back to every cell containing any foreground.
    pub fn grid_mask(&self, support_mask: &Tensor) -> Result<Tensor> {
        let g = self.cfg.encoder.grid();
        let pooled = prompt::downsample_mask(support_mask, g, g)?;
        if pooled.sum() > 0.0 {
            return Ok(pooled);
        }
        let any = prompt::downsample_mask(&support_mask.map(|v| if v > 0.0 { 1e9 } else { 0.0 }), g, g)?;
        if any.sum() == 0.0 {
            return Err(Error::EmptySupportMask);
        }
        Ok(any)
    }

    fn check_pair(&self, image: &Tensor, mask: Option<&Tensor>) -> Result<()> {
        let n = self.cfg.encoder.image_size;
        if image.shape() != [1, n, n] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: image.shape().to_vec(),
                rhs: vec![1, n, n],
            });
        }
        if let Some(m) = mask {
            if m.numel() != n * n {
                return Err(Error::ShapeMismatch {
                    op: "support mask",
                    lhs: m.shape().to_vec(),
                    rhs: vec![n, n],
                });
            }
        }
        Ok(())
    }

    /// Prompts for the configured strategy as a `c×N` matrix, or `None` for
    /// the prompt-free ablation.
    pub fn prompts(
        &self,
        b: &Binder,
        support_image: &Tensor,
        grid_mask: &Tensor,
    ) -> Result<Option<(Var, Option<VisualPrompts>)>> {
        let c = self.cfg.encoder.embed_dim;
        match self.cfg.ablation.prompt {
            PromptStrategy::NoPrompt => Ok(None),
            PromptStrategy::PointPrompt => {
                let code = point_prompts(grid_mask, self.cfg.apl.n_max, c)?;
                Ok(Some((b.g.constant(code)?, None)))
            }
            PromptStrategy::Apl | PromptStrategy::OnePrototype => {
                let feats = self.encoder().encode(b, support_image)?;
                let f_s = b.g.transpose(feats.levels[3])?;
                if self.cfg.ablation.prompt == PromptStrategy::OnePrototype {
                    let p = prompt::masked_average_pooling(b, f_s, grid_mask)?;
                    return Ok(Some((p, None)));
                }
                let msf = prompt::mask_support_features(b, f_s, grid_mask)?;
                let vp = prompt::cluster(b, &msf, &self.cfg.apl)?;
                Ok(Some((vp.centroids, Some(vp))))
            }
        }
    }

    pub fn forward(
        &self,
        b: &Binder,
        support_image: &Tensor,
        support_mask: &Tensor,
        query_image: &Tensor,
    ) -> Result<Forward> {
        self.check_pair(support_image, Some(support_mask))?;
        self.check_pair(query_image, None)?;
        let heads = self.cfg.encoder.num_heads;
        let grid_mask = self.grid_mask(support_mask)?;
        let query = self.encoder().encode(b, query_image)?;

        let (prompted, prompts) = match self.prompts(b, support_image, &grid_mask)? {
            None => (query.levels, None),
            Some((p, vp)) => {
                let fused = prompt::fuse_prompts(b, p, heads)?;
                (prompt::inject_prompts(b, query.levels, fused, heads)?, vp)
            }
        };

        let outs = self
            .cfg
            .ablation
            .decoder
            .levels()
            .iter()
            .map(|&l| {
                decoder::level_block(b, prompted[l - 1], query.levels[l - 1], &grid_mask, l, heads)
                    .map(|(o, _)| o)
            })
            .collect::<Result<Vec<_>>>()?;
        let logits =
            decoder::fuse_and_classify(b, &outs, query.grid, self.cfg.encoder.image_size)?;
        Ok(Forward {
            logits,
            query_levels: query.levels,
            prompted_levels: prompted,
            prompts,
            grid_mask,
        })
    }

    /// Logits as a plain `1×H×W` tensor.
    pub fn logits(
        &self,
        support_image: &Tensor,
        support_mask: &Tensor,
        query_image: &Tensor,
    ) -> Result<Tensor> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let fwd = self.forward(&b, support_image, support_mask, query_image)?;
        let out = g.value(fwd.logits).clone();
        Ok(out)
    }

    /// Binary `H×W` prediction at the 0.5 threshold.
    pub fn predict(
        &self,
        support_image: &Tensor,
        support_mask: &Tensor,
        query_image: &Tensor,
    ) -> Result<Tensor> {
        let n = self.cfg.encoder.image_size;
        let logits = self.logits(support_image, support_mask, query_image)?;
        decoder::predict_mask(&logits, 0.5).reshape(&[n, n])
    }
}

/// `n` foreground cells drawn from the grid mask (without replacement when
/// possible), embedded as a `c×n` sinusoidal code. The draw is seeded by the
/// mask itself so a given support always yields the same points.
pub fn point_prompts(grid_mask: &Tensor, n: usize, c: usize) -> Result<Tensor> {
    let (h, w) = (grid_mask.rows(), grid_mask.cols());
    let fg: Vec<usize> = (0..h * w).filter(|&i| grid_mask.data()[i] >= 0.5).collect();
    if fg.is_empty() {
        return Err(Error::EmptySupportMask);
    }
    let bits: String = grid_mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { '1' } else { '0' })
        .collect();
    let mut r = rng::stream(rng::label_stream(&bits), 0);
    let picks: Vec<usize> = if fg.len() >= n {
        sample(&mut r, fg.len(), n).into_iter().map(|k| fg[k]).collect()
    } else {
        (0..n).map(|_| fg[r.random_range(0..fg.len())]).collect()
    };
    let cells: Vec<(usize, usize)> = picks.iter().map(|&i| (i / w, i % w)).collect();
    let coords = prompt::normalized_coords(&cells, h, w);
    Ok(prompt::point_prompt_code(&coords, c))
}
