//! Episodic training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{CheckpointMeta, RunConfig};
use super::loss::{segmentation_loss, LossTerms};
use crate::checkpoint;
use crate::episodes::{sample_episode, Dataset, Episode, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::optim::{cosine_lr, OptimizerState};
use crate::params::Binder;
use crate::rng;

pub const LOG_HEADER: &str = "epoch,step,l_bce,l_iou,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_bce: f64,
    pub l_iou: f64,
    pub lr: f64,
}

impl LogRecord {
    pub fn total(&self) -> f64 {
        self.l_bce + self.l_iou
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e}",
            self.epoch, self.step, self.l_bce, self.l_iou, self.lr
        )
    }
}

pub fn log_csv(records: &[LogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    s
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub meta: CheckpointMeta,
    pub frozen_hash_before: String,
}

/// Forward, loss, and backward on one episode; returns the loss terms and
/// gradients of every trainable parameter.
pub fn episode_gradients(
    model: &Model,
    ep: &Episode,
    loss_weights: Option<(f64, f64)>,
) -> Result<(LossTerms, std::collections::BTreeMap<String, crate::tensor::Tensor>)> {
    let g = Graph::new();
    let b = Binder::new(&g, &model.params);
    let fwd = model.forward(&b, &ep.support_image, &ep.support_mask, &ep.query_image)?;
    let (vars, terms) = segmentation_loss(&g, fwd.logits, &ep.query_gt, loss_weights)?;
    let grads = g.backward(vars.total)?;
    Ok((terms, b.collect_grads(&grads)))
}

/// Trains a fresh model on episodes from the split's train classes.
/// `on_step` sees every log record as it is produced.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    split: &SplitSpec,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.check(ds)?;
    let size = ds.image_size()?;
    if size != cfg.model.encoder.image_size {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {size}x{size} but the model expects {0}x{0}",
            cfg.model.encoder.image_size
        )));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let frozen_hash_before = model.params.frozen_hash();
    let mut opt = OptimizerState::new(cfg.optim);
    let mut episodes = rng::stream(cfg.seed, rng::label_stream("train-episodes"));
    let total = cfg.total_steps();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(ds, &split.train, &mut episodes)?;
            let lr = cosine_lr(step, total, cfg.lr)?;
            let diverged = |detail: String| Error::Diverged { epoch, step, detail };
            let (terms, grads) = match episode_gradients(&model, &ep, cfg.loss_weights) {
                Err(Error::NumericFault { op, detail }) => {
                    return Err(diverged(format!("{op}: {detail} (class {})", ep.class)))
                }
                other => other?,
            };
            if !terms.total.is_finite() {
                return Err(diverged(format!("loss {:?}", terms)));
            }
            opt.step(&mut model.params, &grads, lr)?;
            let rec = LogRecord {
                epoch,
                step,
                l_bce: terms.l_bce,
                l_iou: terms.l_iou,
                lr,
            };
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    let meta = CheckpointMeta {
        config: cfg.clone(),
        train_classes: split.train.clone(),
        frozen_hash: model.params.frozen_hash(),
    };
    Ok(TrainOutcome {
        model,
        log,
        meta,
        frozen_hash_before,
    })
}

/// Writes the checkpoint, its `.meta` sidecar, and optionally the log CSV.
pub fn save_run(ckpt: &Path, outcome: &TrainOutcome, log_path: Option<&Path>) -> Result<()> {
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save(ckpt, &outcome.model.params)?;
    outcome.meta.save(ckpt)?;
    if let Some(p) = log_path {
        fs::write(p, log_csv(&outcome.log))?;
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint and its metadata.
pub fn load_run(ckpt: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta = CheckpointMeta::load(ckpt)?;
    let mut model = Model::new(meta.config.model.clone(), meta.config.seed)?;
    model.params.load_values(checkpoint::load(ckpt)?)?;
    Ok((model, meta))
}
