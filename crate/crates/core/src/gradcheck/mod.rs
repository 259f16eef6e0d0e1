//! Reverse-mode gradients of the deformable propagation, a central
//! finite-difference oracle to check them against, and a small
//! gradient-descent fitter.

mod backward;
mod fit;

pub use backward::{dspn_backward, DspnGradients, DspnTape};
pub use fit::{fit_loss_and_grad, toy_fit, FitConfig, FitParams, FitResult, FitScene, OffsetModel};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dspn::{EmbeddingParams, FeatureGrid, OffsetField};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::neighborhood::KernelSize;

/// One named, contiguous block of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    pub name: String,
    pub len: usize,
}

/// A flat parameter vector with the segment layout needed to rebuild the
/// structured parameters it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub segments: Vec<ParamSegment>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Vec<f64>)>) -> Self {
        let mut values = Vec::new();
        let mut segs = Vec::with_capacity(segments.len());
        for (name, v) in segments {
            segs.push(ParamSegment { name, len: v.len() });
            values.extend(v);
        }
        Self {
            values,
            segments: segs,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of the segment called `name`.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let mut at = 0;
        for s in &self.segments {
            if s.name == name {
                return Some(&self.values[at..at + s.len]);
            }
            at += s.len;
        }
        None
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` with
/// `h = eps * max(1, |p_i|)`.
pub fn finite_diff_grad<F>(loss_fn: F, p: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = p.clone();
    let mut grad = p.zeros_like();
    for i in 0..p.values.len() {
        let x = p.values[i];
        let h = eps * x.abs().max(1.0);
        probe.values[i] = x + h;
        let up = loss_fn(&probe)?;
        probe.values[i] = x - h;
        let down = loss_fn(&probe)?;
        probe.values[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        grad.values[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Analytic vs numeric gradient comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradReport {
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> Result<Self> {
        if analytic.len() != numeric.len() {
            return Err(Error::ShapeMismatch("gradient lengths differ".into()));
        }
        let mut max_rel_err = 0.0f64;
        let mut max_abs_err = 0.0f64;
        for (&a, &f) in analytic.iter().zip(&numeric) {
            let abs = (a - f).abs();
            max_abs_err = max_abs_err.max(abs);
            max_rel_err = max_rel_err.max(abs / a.abs().max(f.abs()).max(1e-8));
        }
        Ok(Self {
            analytic,
            numeric,
            max_rel_err,
            max_abs_err,
        })
    }
}

/// Parameter groups checked on a propagation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamGroup {
    State,
    Theta,
    Phi,
    Offsets,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::State, Self::Theta, Self::Phi, Self::Offsets];

    pub fn name(self) -> &'static str {
        match self {
            Self::State => "state",
            Self::Theta => "theta",
            Self::Phi => "phi",
            Self::Offsets => "offsets",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub kernel: KernelSize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            size: 8,
            feature_dim: 4,
            embed_dim: 4,
            kernel: KernelSize::THREE,
            eps: 1e-4,
            tolerance: 1e-4,
        }
    }
}

/// A seeded random single-step problem whose loss is a random linear
/// functional of the output, `mean(c * out)`, so that its gradient is exactly
/// the vector-Jacobian product the reverse pass computes.
#[derive(Debug, Clone)]
pub struct StepProblem {
    pub state: Grid,
    pub projection: Grid,
    pub features: FeatureGrid,
    pub emb: EmbeddingParams,
    pub offsets: OffsetField,
}

impl StepProblem {
    /// Offsets are drawn from `(-2, 2)` with fractional parts kept at
    /// least 0.05 away from the lattice, where bilinear sampling has kinks.
    pub fn random(seed: u64, cfg: &GradcheckConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.size;
        let state = Grid::from_fn(s, s, |_, _| rng.random_range(1.0..5.0));
        let projection = Grid::from_fn(s, s, |_, _| StandardNormal.sample(&mut rng));
        // Features vary smoothly across the image, as learned features do:
        // each channel is a sum of random low-frequency waves.
        let mut f = Grid::zeros(s, s, cfg.feature_dim);
        for c in 0..cfg.feature_dim {
            for _ in 0..3 {
                let kx: f64 = rng.random_range(-0.8..0.8);
                let ky: f64 = rng.random_range(-0.8..0.8);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let amp: f64 = StandardNormal.sample(&mut rng);
                for y in 0..s {
                    for x in 0..s {
                        let v =
                            f.get(x, y, c) + amp * (kx * x as f64 + ky * y as f64 + phase).cos();
                        f.set(x, y, c, v);
                    }
                }
            }
        }
        let n = s * s * cfg.kernel.neighbors() * 2;
        let offs = (0..n)
            .map(|_| {
                let whole: i32 = rng.random_range(-2..2);
                whole as f64 + rng.random_range(0.05..0.95)
            })
            .collect();
        let emb_seed = rng.random::<u64>();
        Self {
            state,
            projection,
            features: FeatureGrid::new(f).expect("finite features"),
            emb: EmbeddingParams::random(cfg.embed_dim, cfg.feature_dim, 0.7, emb_seed),
            offsets: OffsetField::new(s, s, cfg.kernel, offs).expect("offset shape"),
        }
    }

    pub fn loss(&self) -> Result<f64> {
        let out = crate::dspn::dspn_step(&self.state, &self.features, &self.offsets, &self.emb)?;
        let mut acc = 0.0;
        for (o, c) in out.data().iter().zip(self.projection.data()) {
            acc += o * c;
        }
        Ok(acc / out.pixels() as f64)
    }

    pub fn analytic(&self) -> Result<DspnGradients> {
        let mut tape = DspnTape::new(&self.features, &self.offsets, &self.emb)?;
        let out = tape.step(&self.state)?;
        let n = out.pixels() as f64;
        let upstream = self.projection.map(|c| c / n);
        tape.backward(&upstream)
    }

    fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::State => self.state.data().to_vec(),
            ParamGroup::Theta => self.emb.theta().to_vec(),
            ParamGroup::Phi => self.emb.phi().to_vec(),
            ParamGroup::Offsets => self.offsets.data().to_vec(),
        }
    }

    fn with_group(&self, group: ParamGroup, values: &[f64]) -> Self {
        let mut p = self.clone();
        match group {
            ParamGroup::State => p.state.data_mut().copy_from_slice(values),
            ParamGroup::Theta => p.emb.theta_mut().copy_from_slice(values),
            ParamGroup::Phi => p.emb.phi_mut().copy_from_slice(values),
            ParamGroup::Offsets => p.offsets.data_mut().copy_from_slice(values),
        }
        p
    }

    /// Analytic vs finite-difference gradients for every parameter group.
    pub fn check(&self, eps: f64) -> Result<Vec<(ParamGroup, GradReport)>> {
        let grads = self.analytic()?;
        let mut out = Vec::with_capacity(4);
        for group in ParamGroup::ALL {
            let p = ParamVector::new(vec![(group.name().to_string(), self.group_values(group))]);
            let numeric = finite_diff_grad(|v| self.with_group(group, &v.values).loss(), &p, eps)?;
            let analytic = match group {
                ParamGroup::State => grads.d_input.data().to_vec(),
                ParamGroup::Theta => grads.d_theta.clone(),
                ParamGroup::Phi => grads.d_phi.clone(),
                ParamGroup::Offsets => grads.d_offsets.data().to_vec(),
            };
            out.push((group, GradReport::compare(analytic, numeric.values)?));
        }
        Ok(out)
    }
}

/// Worst relative error per group over `instances` seeded problems.
pub fn run_gradcheck(
    cfg: &GradcheckConfig,
    seed: u64,
    instances: usize,
) -> Result<Vec<(ParamGroup, f64, f64)>> {
    let mut worst: Vec<(ParamGroup, f64, f64)> =
        ParamGroup::ALL.iter().map(|&g| (g, 0.0, 0.0)).collect();
    for i in 0..instances {
        let problem = StepProblem::random(seed.wrapping_add(i as u64), cfg);
        for (k, (_, report)) in problem.check(cfg.eps)?.into_iter().enumerate() {
            worst[k].1 = worst[k].1.max(report.max_rel_err);
            worst[k].2 = worst[k].2.max(report.max_abs_err);
        }
    }
    Ok(worst)
}
