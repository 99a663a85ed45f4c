//! Few-shot binary segmentation with adaptive prompt learning.
//!
//! A frozen miniature vision transformer with trainable high-frequency
//! adapters encodes support and query images. Masked support features are
//! softly clustered into a variable number of visual prompts, fused with
//! learned tokens, and injected into the query features. A multi-level
//! decoder turns the prompted features into a per-pixel mask.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod training;

pub use decoder::DecoderMode;
pub use encoder::{EncoderConfig, MultiLevelFeatures};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{AblationMode, Model, ModelConfig, PromptStrategy};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{Binder, Param, ParamStore};
pub use prompt::{AplConfig, VisualPrompts};
pub use tensor::Tensor;
pub use training::{EvalReport, RunConfig};
