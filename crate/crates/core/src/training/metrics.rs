//! Overlap metrics and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel counts of a binary prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.numel() != gt.numel() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p >= 0.5, g >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dsc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dsc())
}

/// `TP / (TP + FP + FN)`; 1 when both masks are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub dsc: f64,
    pub iou: f64,
    pub episodes: usize,
}

/// Per-class and overall means, in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: BTreeMap<String, ClassScore>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub episodes: usize,
}

/// Accumulates per-episode scores by class.
#[derive(Clone, Debug, Default)]
pub struct ScoreAccumulator {
    sums: BTreeMap<String, (f64, f64, usize)>,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `dsc` and `iou` as fractions in `[0, 1]`.
    pub fn push(&mut self, class: &str, dsc: f64, iou: f64) {
        let e = self.sums.entry(class.to_string()).or_default();
        e.0 += dsc;
        e.1 += iou;
        e.2 += 1;
    }

    pub fn finish(&self) -> EvalReport {
        let classes = self
            .sums
            .iter()
            .map(|(k, &(d, i, n))| {
                (
                    k.clone(),
                    ClassScore {
                        dsc: 100.0 * d / n as f64,
                        iou: 100.0 * i / n as f64,
                        episodes: n,
                    },
                )
            })
            .collect();
        EvalReport::from_classes(classes)
    }
}

impl EvalReport {
    /// Overall means are the unweighted mean of the per-class means.
    pub fn from_classes(classes: BTreeMap<String, ClassScore>) -> Self {
        let n = classes.len().max(1) as f64;
        let mean_dsc = classes.values().map(|c| c.dsc).sum::<f64>() / n;
        let mean_iou = classes.values().map(|c| c.iou).sum::<f64>() / n;
        let episodes = classes.values().map(|c| c.episodes).sum();
        Self {
            classes,
            mean_dsc,
            mean_iou,
            episodes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,episodes,dsc,iou\n");
        for (k, c) in &self.classes {
            let _ = writeln!(s, "{k},{},{:.2},{:.2}", c.episodes, c.dsc, c.iou);
        }
        let _ = writeln!(s, "mean,{},{:.2},{:.2}", self.episodes, self.mean_dsc, self.mean_iou);
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(0)
            .max("class".len())
            .max("mean".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>7}  {:>7}", "class", "episodes", "DSC", "IoU");
        for (k, c) in &self.classes {
            let _ = writeln!(s, "{k:<width$}  {:>8}  {:>7.2}  {:>7.2}", c.episodes, c.dsc, c.iou);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>7.2}  {:>7.2}",
            "mean", self.episodes, self.mean_dsc, self.mean_iou
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: usize, fp: usize, fn_: usize) -> (Tensor, Tensor) {
        let n = tp + fp + fn_;
        let mut pred = vec![0.0; n];
        let mut gt = vec![0.0; n];
        for i in 0..tp {
            pred[i] = 1.0;
            gt[i] = 1.0;
        }
        for i in tp..tp + fp {
            pred[i] = 1.0;
        }
        for i in tp + fp..n {
            gt[i] = 1.0;
        }
        (Tensor::new(&[n], pred).unwrap(), Tensor::new(&[n], gt).unwrap())
    }

    #[test]
    fn closed_forms() {
        let (p, g) = counts(50, 10, 10);
        assert!((dsc(&p, &g).unwrap() - 100.0 / 120.0).abs() < 1e-15);
        assert!((iou(&p, &g).unwrap() - 50.0 / 70.0).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_score_one() {
        let z = Tensor::zeros(&[8]);
        assert_eq!(dsc(&z, &z).unwrap(), 1.0);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let (p, g) = counts(0, 5, 5);
        assert_eq!(iou(&p, &g).unwrap(), 0.0);
        assert_eq!(dsc(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn csv_has_mean_row() {
        let mut acc = ScoreAccumulator::new();
        acc.push("a", 1.0, 1.0);
        acc.push("b", 0.5, 0.25);
        let r = acc.finish();
        assert_eq!(r.mean_dsc, 75.0);
        assert!(r.to_csv().ends_with("mean,2,75.00,62.50\n"));
        assert!(r.to_table().contains("62.50"));
    }
}
