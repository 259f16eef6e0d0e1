//! Fixed-window spatial propagation with abs-normalized affinity stencils.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::neighborhood::KernelSize;

/// Raw per-pixel affinities over the k x k window minus the centre, stored
/// pixel-major in the raster order of [`KernelSize::ring`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityStencilField {
    width: usize,
    height: usize,
    kernel: KernelSize,
    data: Vec<f64>,
}

impl AffinityStencilField {
    pub fn new(width: usize, height: usize, kernel: KernelSize, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * kernel.neighbors();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "stencil field needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidAffinity(format!(
                "non-finite raw affinity {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            kernel,
            data,
        })
    }

    /// Same raw stencil at every pixel.
    pub fn uniform(width: usize, height: usize, kernel: KernelSize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            kernel,
            vec![value; width * height * kernel.neighbors()],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kernel(&self) -> KernelSize {
        self.kernel
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw stencil of the pixel with flat index `pixel`.
    pub fn stencil(&self, pixel: usize) -> &[f64] {
        let n = self.kernel.neighbors();
        &self.data[pixel * n..(pixel + 1) * n]
    }

    fn ensure_matches(&self, g: &Grid) -> Result<()> {
        if self.width == g.width() && self.height == g.height() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "stencil field {}x{} vs grid {}x{}",
                self.width,
                self.height,
                g.width(),
                g.height()
            )))
        }
    }
}

/// Normalized neighbour weights and the implied self weight.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStencil {
    pub weights: Vec<f64>,
    pub self_weight: f64,
}

/// `k_j = raw_j / sum|raw|`, self weight `1 - sum k_j`. An all-zero stencil
/// yields identity propagation.
pub fn normalize_stencil(raw: &[f64]) -> Result<NormalizedStencil> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidAffinity(format!(
            "non-finite raw affinity {v}"
        )));
    }
    let abs_sum: f64 = raw.iter().map(|v| v.abs()).sum();
    if abs_sum == 0.0 {
        return Ok(NormalizedStencil {
            weights: vec![0.0; raw.len()],
            self_weight: 1.0,
        });
    }
    let weights: Vec<f64> = raw.iter().map(|v| v / abs_sum).collect();
    let self_weight = 1.0 - weights.iter().sum::<f64>();
    Ok(NormalizedStencil {
        weights,
        self_weight,
    })
}

/// Normalized stencils for every pixel, ready to be applied repeatedly.
#[derive(Debug, Clone)]
pub struct CspnOperator {
    width: usize,
    height: usize,
    ring: Vec<(isize, isize)>,
    weights: Vec<f64>,
    self_weights: Vec<f64>,
}

impl CspnOperator {
    pub fn new(stencils: &AffinityStencilField) -> Result<Self> {
        let n = stencils.kernel.neighbors();
        let pixels = stencils.width * stencils.height;
        let mut weights = Vec::with_capacity(pixels * n);
        let mut self_weights = Vec::with_capacity(pixels);
        for p in 0..pixels {
            let s = normalize_stencil(stencils.stencil(p))?;
            weights.extend_from_slice(&s.weights);
            self_weights.push(s.self_weight);
        }
        Ok(Self {
            width: stencils.width,
            height: stencils.height,
            ring: stencils.kernel.ring(),
            weights,
            self_weights,
        })
    }

    pub fn apply(&self, h: &Grid) -> Result<Grid> {
        h.ensure_single_channel("cspn input")?;
        if h.width() != self.width || h.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "stencil field {}x{} vs grid {}x{}",
                self.width,
                self.height,
                h.width(),
                h.height()
            )));
        }
        let n = self.ring.len();
        let mut out = Grid::zeros(self.width, self.height, 1);
        let dst = out.data_mut();
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                let w = &self.weights[p * n..(p + 1) * n];
                let mut acc = self.self_weights[p] * h.data()[p];
                for (&(dx, dy), &wj) in self.ring.iter().zip(w) {
                    acc += wj * h.get_clamped(x as isize + dx, y as isize + dy, 0);
                }
                dst[p] = acc;
            }
        }
        Ok(out)
    }
}

/// One propagation step; out-of-image neighbours are border-clamped reads.
pub fn cspn_step(h: &Grid, stencils: &AffinityStencilField) -> Result<Grid> {
    stencils.ensure_matches(h)?;
    CspnOperator::new(stencils)?.apply(h)
}

pub(crate) fn ensure_binary_mask(m: &Grid) -> Result<()> {
    match m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::InvalidMask(format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `(1 - m) * h + m * hs`; where `m == 1` the output is `hs` bit-for-bit.
pub fn hard_replace(h: &Grid, hs: &Grid, m: &Grid) -> Result<Grid> {
    h.ensure_same_shape(hs, "hard_replace sparse")?;
    h.ensure_same_shape(m, "hard_replace mask")?;
    ensure_binary_mask(m)?;
    let mut out = h.clone();
    for ((o, &s), &mv) in out.data_mut().iter_mut().zip(hs.data()).zip(m.data()) {
        if mv == 1.0 {
            *o = s;
        }
    }
    Ok(out)
}

/// `iters` rounds of [`cspn_step`] followed by [`hard_replace`], from `d0`.
pub fn cspn_refine(
    d0: &Grid,
    ds: &Grid,
    m: &Grid,
    stencils: &AffinityStencilField,
    iters: usize,
) -> Result<Grid> {
    d0.ensure_single_channel("coarse depth")?;
    d0.ensure_same_shape(ds, "cspn_refine sparse")?;
    d0.ensure_same_shape(m, "cspn_refine mask")?;
    ensure_binary_mask(m)?;
    stencils.ensure_matches(d0)?;
    let op = CspnOperator::new(stencils)?;
    let mut h = d0.clone();
    for _ in 0..iters {
        h = hard_replace(&op.apply(&h)?, ds, m)?;
    }
    Ok(h)
}
