//! Balanced cross-entropy plus soft IoU.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l_bce: f64,
    pub l_iou: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_bce: Var,
    pub l_iou: Var,
    pub total: Var,
}

/// `(α, β) = (N_bg/N, N_fg/N)`: the rarer class gets the larger weight.
pub fn balance_weights(gt: &Tensor) -> (f64, f64) {
    let n = gt.numel() as f64;
    let fg = gt.data().iter().filter(|&&v| v >= 0.5).count() as f64;
    ((n - fg) / n, fg / n)
}

fn check(g: &Graph, p: Var, gt: &Tensor, op: &'static str) -> Result<()> {
    let shape = g.shape(p);
    if shape.iter().product::<usize>() != gt.numel() || (gt.rank() == shape.len() && gt.shape() != shape) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Clamped sigmoid of the logits.
pub fn probabilities(g: &Graph, logits: Var) -> Result<Var> {
    let p = g.sigmoid(logits)?;
    g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
}

/// `mean(-(α·gt·log p + β·(1-gt)·log(1-p)))`
pub fn balanced_bce(g: &Graph, p: Var, gt: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
    check(g, p, gt, "balanced_bce")?;
    let shape = g.shape(p);
    let gt_v = g.constant(gt.reshape(&shape)?)?;
    let neg_gt = g.constant(gt.map(|v| 1.0 - v).reshape(&shape)?)?;
    let log_p = g.log(p)?;
    let one_minus = g.add_scalar(g.scale(p, -1.0)?, 1.0)?;
    let log_q = g.log(one_minus)?;
    let pos = g.scale(g.mul(gt_v, log_p)?, alpha)?;
    let neg = g.scale(g.mul(neg_gt, log_q)?, beta)?;
    let m = g.mean(g.add(pos, neg)?)?;
    g.scale(m, -1.0)
}

/// `1 - Σ(p·gt) / (Σp + Σgt - Σ(p·gt))`, zero when both are empty.
pub fn soft_iou_loss(g: &Graph, p: Var, gt: &Tensor) -> Result<Var> {
    check(g, p, gt, "soft_iou_loss")?;
    let shape = g.shape(p);
    let gt_sum = gt.sum();
    let sp = g.sum(p)?;
    if gt_sum == 0.0 && g.value(sp).item() == 0.0 {
        return g.scale(sp, 0.0);
    }
    let gt_v = g.constant(gt.reshape(&shape)?)?;
    let inter = g.sum(g.mul(p, gt_v)?)?;
    let union = g.sub(g.add_scalar(sp, gt_sum)?, inter)?;
    let ratio = g.div(inter, union)?;
    g.add_scalar(g.scale(ratio, -1.0)?, 1.0)
}

/// Total segmentation loss on logits. `weights` overrides the per-episode
/// class-balance factors.
pub fn segmentation_loss(
    g: &Graph,
    logits: Var,
    gt: &Tensor,
    weights: Option<(f64, f64)>,
) -> Result<(LossVars, LossTerms)> {
    let (alpha, beta) = weights.unwrap_or_else(|| balance_weights(gt));
    let p = probabilities(g, logits)?;
    let l_bce = balanced_bce(g, p, gt, alpha, beta)?;
    let l_iou = soft_iou_loss(g, p, gt)?;
    let total = g.add(l_bce, l_iou)?;
    let terms = LossTerms {
        l_bce: g.value(l_bce).item(),
        l_iou: g.value(l_iou).item(),
        total: g.value(total).item(),
        alpha,
        beta,
    };
    Ok((LossVars { l_bce, l_iou, total }, terms))
}
