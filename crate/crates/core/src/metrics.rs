//! KITTI-style depth error metrics and the training losses.
//!
//! Depth errors are reported in millimeters and inverse-depth errors in
//! 1/km. Only pixels with positive ground truth are evaluated. Sums run in
//! row-major order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Predictions below this depth (meters) are floored before inversion.
pub const INVERSE_DEPTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// mm
    pub rmse: f64,
    /// mm
    pub mae: f64,
    /// 1/km
    pub irmse: f64,
    /// 1/km
    pub imae: f64,
    pub valid_count: usize,
}

impl MetricReport {
    /// Unweighted mean of several reports, as used for per-suite summaries.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            rmse: sum(|r| r.rmse),
            mae: sum(|r| r.mae),
            irmse: sum(|r| r.irmse),
            imae: sum(|r| r.imae),
            valid_count: reports.iter().map(|r| r.valid_count).sum(),
        })
    }
}

pub fn eval_metrics(pred: &Grid, gt: &Grid) -> Result<MetricReport> {
    pred.ensure_same_shape(gt, "eval_metrics")?;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut isq = 0.0;
    let mut iabs = 0.0;
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g <= 0.0 {
            continue;
        }
        let e = p - g;
        sq += e * e;
        abs += e.abs();
        let ie = 1.0 / p.max(INVERSE_DEPTH_FLOOR) - 1.0 / g;
        isq += ie * ie;
        iabs += ie.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse: (sq / nf).sqrt() * 1000.0,
        mae: abs / nf * 1000.0,
        irmse: (isq / nf).sqrt() * 1000.0,
        imae: iabs / nf * 1000.0,
        valid_count: n,
    })
}

/// Mean squared difference over pixels where `mask` is nonzero (all pixels
/// when no mask is given).
pub fn l2_loss(pred: &Grid, target: &Grid, mask: Option<&Grid>) -> Result<f64> {
    pred.ensure_same_shape(target, "l2_loss")?;
    if let Some(m) = mask {
        pred.ensure_same_shape(m, "l2_loss mask")?;
    }
    let mut sum = NeumaierSum::default();
    let mut n = 0usize;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        let e = p - t;
        sum.add(e * e);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(sum.value() / n as f64)
}

/// Compensated left-to-right summation.
#[derive(Debug, Default, Clone, Copy)]
struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.compensation
    }
}

/// Weights of the coarse-depth, refined-depth and confidence loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        let w = Self {
            lambda,
            alpha,
            beta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.alpha, self.beta]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "loss weights must be finite and >= 0".into(),
            ))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

pub fn total_loss(l_coarse: f64, l_refined: f64, l_conf: f64, w: &LossWeights) -> f64 {
    w.lambda * l_coarse + w.alpha * l_refined + w.beta * l_conf
}
