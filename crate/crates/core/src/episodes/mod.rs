//! Datasets, class splits, episode sampling, and synthetic data.

pub mod dataset;
pub mod io;
pub mod synth;

pub use dataset::{load_dataset, sample_episode, Dataset, Episode, Sample, SplitSpec};
pub use synth::{default_classes, generate_synthetic, ClassParams, SyntheticConfig, SyntheticSample};
