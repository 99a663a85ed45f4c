//! Loss, metrics, run configuration, training, and evaluation.

pub mod config;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod train;

pub use config::{CheckpointMeta, RunConfig};
pub use eval::{evaluate, ModelPredictor, OraclePredictor, Predictor};
pub use loss::{balanced_bce, segmentation_loss, soft_iou_loss, LossTerms};
pub use metrics::{dsc, iou, EvalReport};
pub use train::{load_run, save_run, train, LogRecord, TrainOutcome};
