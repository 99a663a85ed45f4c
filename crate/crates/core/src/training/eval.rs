//! Evaluation over held-out classes.

use std::collections::BTreeSet;

use super::metrics::{Confusion, EvalReport, ScoreAccumulator};
use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::Tensor;

/// Anything that maps an episode to a binary query mask.
pub trait Predictor {
    fn predict(&self, ep: &Episode) -> Result<Tensor>;

    /// Classes seen in training, if known.
    fn train_classes(&self) -> Option<&BTreeSet<String>> {
        None
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub train_classes: BTreeSet<String>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, ep: &Episode) -> Result<Tensor> {
        self.model
            .predict(&ep.support_image, &ep.support_mask, &ep.query_image)
    }

    fn train_classes(&self) -> Option<&BTreeSet<String>> {
        Some(&self.train_classes)
    }
}

/// Echoes the ground truth; scores 100 everywhere.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, ep: &Episode) -> Result<Tensor> {
        Ok(ep.query_gt.clone())
    }
}

/// Stream of evaluation episodes for a seed, shared by every predictor.
pub fn eval_episodes(
    ds: &Dataset,
    classes: &BTreeSet<String>,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut r = rng::stream(seed, rng::label_stream("eval-episodes"));
    (0..n_episodes)
        .map(|_| sample_episode(ds, classes, &mut r))
        .collect()
}

pub fn evaluate(
    predictor: &dyn Predictor,
    ds: &Dataset,
    test_classes: &BTreeSet<String>,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    if let Some(seen) = predictor.train_classes() {
        let overlap: Vec<&String> = seen.intersection(test_classes).collect();
        if !overlap.is_empty() {
            return Err(Error::SplitViolation(format!(
                "test classes {overlap:?} were used in training"
            )));
        }
    }
    let mut acc = ScoreAccumulator::new();
    for ep in eval_episodes(ds, test_classes, n_episodes, seed)? {
        let pred = predictor.predict(&ep)?;
        let c = Confusion::of(&pred, &ep.query_gt)?;
        acc.push(&ep.class, c.dsc(), c.iou());
    }
    Ok(acc.finish())
}
