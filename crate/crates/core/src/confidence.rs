//! Confidence of sparse measurements and confidence-weighted replacement.

use serde::{Deserialize, Serialize};

use crate::cspn::ensure_binary_mask;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Tolerance `gamma` (meters) of the exponential confidence model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceConfig {
    pub gamma: f64,
}

impl ConfidenceConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        let cfg = Self { gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )))
        }
    }
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

/// Supervision target `m * exp(-|D* - Ds| / gamma)`.
pub fn confidence_target(
    dstar: &Grid,
    ds: &Grid,
    m: &Grid,
    cfg: &ConfidenceConfig,
) -> Result<Grid> {
    cfg.validate()?;
    dstar.ensure_same_shape(ds, "confidence_target sparse")?;
    dstar.ensure_same_shape(m, "confidence_target mask")?;
    ensure_binary_mask(m)?;
    let mut out = m.clone();
    for ((o, &gt), &s) in out.data_mut().iter_mut().zip(dstar.data()).zip(ds.data()) {
        if *o == 1.0 {
            *o = (-(gt - s).abs() / cfg.gamma).exp();
        }
    }
    Ok(out)
}

pub(crate) fn ensure_unit_interval(conf: &Grid) -> Result<()> {
    match conf.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(v) => Err(Error::InvalidConfidence(format!(
            "confidence {v} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// `(1 - m*M) * h + m*M * hs`, with `blend = m*M` precomputed.
pub(crate) fn soft_replace_into(h: &mut [f64], hs: &[f64], blend: &[f64]) {
    for ((v, &s), &b) in h.iter_mut().zip(hs).zip(blend) {
        if b == 1.0 {
            *v = s;
        } else if b != 0.0 {
            // Clamp away rounding so the result never leaves [v, s].
            let (lo, hi) = (v.min(s), v.max(s));
            *v = ((1.0 - b) * *v + b * s).clamp(lo, hi);
        }
    }
}

/// Confidence-weighted replacement. With `M == 1` this is exactly
/// [`crate::cspn::hard_replace`].
pub fn soft_replace(h: &Grid, hs: &Grid, m: &Grid, conf: &Grid) -> Result<Grid> {
    h.ensure_same_shape(hs, "soft_replace sparse")?;
    h.ensure_same_shape(m, "soft_replace mask")?;
    h.ensure_same_shape(conf, "soft_replace confidence")?;
    ensure_binary_mask(m)?;
    ensure_unit_interval(conf)?;
    let blend: Vec<f64> = m
        .data()
        .iter()
        .zip(conf.data())
        .map(|(a, b)| a * b)
        .collect();
    let mut out = h.clone();
    soft_replace_into(out.data_mut(), hs.data(), &blend);
    Ok(out)
}

/// Inference-time stand-in for a learned confidence map: each measurement is
/// compared with the median of the valid measurements in its 3x3 window.
/// Pixels without a measurement get confidence 0.
pub fn heuristic_confidence(ds: &Grid, m: &Grid, cfg: &ConfidenceConfig) -> Result<Grid> {
    cfg.validate()?;
    ds.ensure_same_shape(m, "heuristic_confidence mask")?;
    ds.ensure_single_channel("sparse depth")?;
    ensure_binary_mask(m)?;
    let (w, h) = (ds.width(), ds.height());
    let mut out = Grid::zeros(w, h, 1);
    let mut window = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            if m.get(x, y, 0) != 1.0 {
                continue;
            }
            window.clear();
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if m.get(xx, yy, 0) == 1.0 {
                        window.push(ds.get(xx, yy, 0));
                    }
                }
            }
            let med = median(&mut window);
            out.set(x, y, 0, (-(ds.get(x, y, 0) - med).abs() / cfg.gamma).exp());
        }
    }
    Ok(out)
}

/// Median; the mean of the two middle values for even counts.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
