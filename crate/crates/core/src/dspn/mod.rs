//! Deformable spatial propagation.
//!
//! Each pixel reads its `k*k - 1` neighbours at continuously displaced
//! positions and mixes them with softmax weights derived from the dot product
//! of embedded features. The operator built from a feature map, an offset
//! field and the embedding matrices does not depend on the propagated state,
//! so [`DspnOperator`] precomputes positions and weights once and reuses them
//! across iterations.

mod estimator;

pub use estimator::{ConvLayer, EstimatorActivations, OffsetEstimatorParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::confidence::soft_replace_into;
use crate::error::{Error, Result};
use crate::grid::{BilinearTaps, ContinuousPos, Grid};
use crate::neighborhood::KernelSize;

/// Per-pixel, per-neighbour `(dx, dy)` displacements.
///
/// Memory layout equals a `width x height x 2(k*k-1)` [`Grid`]: channel
/// `2j` is the x displacement of neighbour `j`, channel `2j + 1` the y one.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    width: usize,
    height: usize,
    kernel: KernelSize,
    data: Vec<f64>,
}

impl OffsetField {
    pub fn zeros(width: usize, height: usize, kernel: KernelSize) -> Self {
        Self {
            width,
            height,
            kernel,
            data: vec![0.0; width * height * kernel.neighbors() * 2],
        }
    }

    pub fn new(width: usize, height: usize, kernel: KernelSize, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * kernel.neighbors() * 2;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "offset field needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPosition {
                x: f64::NAN,
                y: f64::NAN,
            });
        }
        Ok(Self {
            width,
            height,
            kernel,
            data,
        })
    }

    /// Reinterprets a `2(k*k-1)`-channel grid as an offset field.
    pub fn from_grid(grid: Grid, kernel: KernelSize) -> Result<Self> {
        if grid.channels() != 2 * kernel.neighbors() {
            return Err(Error::ShapeMismatch(format!(
                "offset grid has {} channels, kernel {} needs {}",
                grid.channels(),
                kernel.get(),
                2 * kernel.neighbors()
            )));
        }
        let (w, h) = (grid.width(), grid.height());
        Self::new(w, h, kernel, grid.into_vec())
    }

    pub fn into_grid(self) -> Grid {
        let c = 2 * self.kernel.neighbors();
        Grid::from_vec(self.width, self.height, c, self.data).expect("offset layout")
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, pixel: usize, neighbor: usize) -> (f64, f64) {
        let i = (pixel * self.kernel.neighbors() + neighbor) * 2;
        (self.data[i], self.data[i + 1])
    }
}

/// A feature map `F` with `d_F >= 1` finite channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid(Grid);

impl FeatureGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.channels() == 0 {
            return Err(Error::InvalidFeature("feature map has no channels".into()));
        }
        if !grid.all_finite() {
            return Err(Error::InvalidFeature("non-finite feature value".into()));
        }
        Ok(Self(grid))
    }

    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Query and key projections `g_theta`, `g_phi`, each `embed_dim x feature_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    embed_dim: usize,
    feature_dim: usize,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

impl EmbeddingParams {
    pub fn new(
        embed_dim: usize,
        feature_dim: usize,
        theta: Vec<f64>,
        phi: Vec<f64>,
    ) -> Result<Self> {
        let n = embed_dim * feature_dim;
        if embed_dim == 0 || feature_dim == 0 || theta.len() != n || phi.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "embedding {embed_dim}x{feature_dim} needs {n} entries per matrix, got {} and {}",
                theta.len(),
                phi.len()
            )));
        }
        if theta.iter().chain(&phi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite embedding entry".into()));
        }
        Ok(Self {
            embed_dim,
            feature_dim,
            theta,
            phi,
        })
    }

    pub fn zeros(embed_dim: usize, feature_dim: usize) -> Self {
        let n = embed_dim * feature_dim;
        Self {
            embed_dim,
            feature_dim,
            theta: vec![0.0; n],
            phi: vec![0.0; n],
        }
    }

    /// Independent N(0, std^2) entries from a seeded ChaCha8 stream.
    pub fn random(embed_dim: usize, feature_dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
        let n = embed_dim * feature_dim;
        let theta = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let phi = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self {
            embed_dim,
            feature_dim,
            theta,
            phi,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    /// The same parameters with the two projections exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            embed_dim: self.embed_dim,
            feature_dim: self.feature_dim,
            theta: self.phi.clone(),
            phi: self.theta.clone(),
        }
    }

    pub(crate) fn project(matrix: &[f64], feature_dim: usize, f: &[f64], out: &mut [f64]) {
        for (row, o) in matrix.chunks_exact(feature_dim).zip(out.iter_mut()) {
            *o = row.iter().zip(f).map(|(a, b)| a * b).sum();
        }
    }

    pub fn query(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        Self::project(&self.theta, self.feature_dim, f, &mut out);
        out
    }

    pub fn key(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        Self::project(&self.phi, self.feature_dim, f, &mut out);
        out
    }

    fn ensure_matches(&self, f: &FeatureGrid) -> Result<()> {
        if f.dim() == self.feature_dim {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "feature map has {} channels, embedding expects {}",
                f.dim(),
                self.feature_dim
            )))
        }
    }
}

/// Softmax affinities of one pixel: neighbour weights plus the self weight
/// `1 - sum(weights)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityWeights {
    pub weights: Vec<f64>,
    pub self_weight: f64,
}

/// Max-shifted softmax in place.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in logits.iter_mut() {
        *v /= z;
    }
}

/// The `k*k - 1` displaced sample positions of pixel `(x, y)`, in ring order.
pub fn deformed_neighborhood(
    x: usize,
    y: usize,
    kernel: KernelSize,
    offsets: &OffsetField,
) -> Result<Vec<ContinuousPos>> {
    if offsets.kernel != kernel {
        return Err(Error::ShapeMismatch(format!(
            "offset field kernel {} vs requested {}",
            offsets.kernel.get(),
            kernel.get()
        )));
    }
    if x >= offsets.width || y >= offsets.height {
        return Err(Error::ShapeMismatch(format!(
            "pixel ({x}, {y}) outside {}x{} offset field",
            offsets.width, offsets.height
        )));
    }
    let pixel = y * offsets.width + x;
    Ok(kernel
        .ring()
        .into_iter()
        .enumerate()
        .map(|(j, (dx, dy))| {
            let (ox, oy) = offsets.get(pixel, j);
            ContinuousPos::new(x as f64 + dx as f64 + ox, y as f64 + dy as f64 + oy)
        })
        .collect())
}

/// Softmax similarity between pixel `(x, y)` and the given sample positions.
///
/// Features at the positions are bilinearly sampled channel by channel and
/// then projected by `g_phi`; logits are scaled by `1/sqrt(d_F)`. The
/// normaliser includes the pixel's similarity with itself.
pub fn compute_affinity(
    features: &FeatureGrid,
    emb: &EmbeddingParams,
    x: usize,
    y: usize,
    nbrs: &[ContinuousPos],
) -> Result<AffinityWeights> {
    emb.ensure_matches(features)?;
    let f = features.grid();
    if x >= f.width() || y >= f.height() {
        return Err(Error::ShapeMismatch(format!(
            "pixel ({x}, {y}) outside feature map"
        )));
    }
    if let Some(p) = nbrs.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidPosition { x: p.x, y: p.y });
    }
    let d = features.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let centre = f.pixel(x, y);
    let q = emb.query(centre);
    let dot = |k: &[f64]| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;

    let mut logits = Vec::with_capacity(nbrs.len() + 1);
    logits.push(dot(&emb.key(centre)));
    let mut sampled = vec![0.0; d];
    for &p in nbrs {
        for (c, s) in sampled.iter_mut().enumerate() {
            *s = f.sample(p, c);
        }
        logits.push(dot(&emb.key(&sampled)));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidFeature("non-finite similarity logit".into()));
    }
    softmax_in_place(&mut logits);
    let weights = logits[1..].to_vec();
    let self_weight = 1.0 - weights.iter().sum::<f64>();
    Ok(AffinityWeights {
        weights,
        self_weight,
    })
}

/// Sample positions and softmax weights of every pixel for one feature map,
/// offset field and embedding.
#[derive(Debug, Clone)]
pub struct DspnOperator {
    width: usize,
    height: usize,
    kernel: KernelSize,
    scale: f64,
    positions: Vec<ContinuousPos>,
    taps: Vec<BilinearTaps>,
    /// `n + 1` per pixel; index 0 is the self weight.
    weights: Vec<f64>,
    /// `g_theta F` per pixel.
    queries: Vec<f64>,
    /// `g_phi F` as a grid; sampling it equals projecting sampled features.
    keys: Grid,
}

impl DspnOperator {
    pub fn new(
        features: &FeatureGrid,
        offsets: &OffsetField,
        emb: &EmbeddingParams,
    ) -> Result<Self> {
        emb.ensure_matches(features)?;
        let f = features.grid();
        let (w, h) = (f.width(), f.height());
        if offsets.width != w || offsets.height != h {
            return Err(Error::ShapeMismatch(format!(
                "offset field {}x{} vs feature map {}x{}",
                offsets.width, offsets.height, w, h
            )));
        }
        let kernel = offsets.kernel;
        let n = kernel.neighbors();
        let e = emb.embed_dim;
        let d = emb.feature_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let pixels = w * h;

        let mut queries = vec![0.0; pixels * e];
        let mut keys = Grid::zeros(w, h, e);
        for p in 0..pixels {
            let fp = &f.data()[p * d..(p + 1) * d];
            EmbeddingParams::project(&emb.theta, d, fp, &mut queries[p * e..(p + 1) * e]);
            EmbeddingParams::project(&emb.phi, d, fp, &mut keys.data_mut()[p * e..(p + 1) * e]);
        }

        let ring = kernel.ring();
        let mut positions = Vec::with_capacity(pixels * n);
        let mut taps = Vec::with_capacity(pixels * n);
        let mut weights = vec![0.0; pixels * (n + 1)];
        let kd = keys.data();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let q = &queries[p * e..(p + 1) * e];
                let logits = &mut weights[p * (n + 1)..(p + 1) * (n + 1)];
                logits[0] = dot(q, &kd[p * e..(p + 1) * e]) * scale;
                for (j, &(dx, dy)) in ring.iter().enumerate() {
                    let (ox, oy) = offsets.get(p, j);
                    let pos =
                        ContinuousPos::new(x as f64 + dx as f64 + ox, y as f64 + dy as f64 + oy);
                    let t = BilinearTaps::new(w, h, pos);
                    let tw = t.weights();
                    let mut acc = 0.0;
                    for a in 0..e {
                        let k = tw[0] * kd[t.pixel[0] * e + a]
                            + tw[1] * kd[t.pixel[1] * e + a]
                            + tw[2] * kd[t.pixel[2] * e + a]
                            + tw[3] * kd[t.pixel[3] * e + a];
                        acc += q[a] * k;
                    }
                    logits[j + 1] = acc * scale;
                    positions.push(pos);
                    taps.push(t);
                }
                if logits.iter().any(|l| !l.is_finite()) {
                    return Err(Error::InvalidFeature("non-finite similarity logit".into()));
                }
                softmax_in_place(logits);
                logits[0] = 1.0 - logits[1..].iter().sum::<f64>();
            }
        }
        Ok(Self {
            width: w,
            height: h,
            kernel,
            scale,
            positions,
            taps,
            weights,
            queries,
            keys,
        })
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

    pub(crate) fn scale(&self) -> f64 {
        self.scale
    }

    pub(crate) fn taps(&self) -> &[BilinearTaps] {
        &self.taps
    }

    pub(crate) fn raw_weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn queries(&self) -> &[f64] {
        &self.queries
    }

    pub(crate) fn keys(&self) -> &Grid {
        &self.keys
    }

    pub fn positions(&self, pixel: usize) -> &[ContinuousPos] {
        let n = self.kernel.neighbors();
        &self.positions[pixel * n..(pixel + 1) * n]
    }

    pub fn affinity(&self, pixel: usize) -> AffinityWeights {
        let n = self.kernel.neighbors();
        let w = &self.weights[pixel * (n + 1)..(pixel + 1) * (n + 1)];
        AffinityWeights {
            weights: w[1..].to_vec(),
            self_weight: w[0],
        }
    }

    fn ensure_matches(&self, h: &Grid) -> Result<()> {
        h.ensure_single_channel("dspn input")?;
        if h.width() != self.width || h.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "operator {}x{} vs grid {}x{}",
                self.width,
                self.height,
                h.width(),
                h.height()
            )));
        }
        Ok(())
    }

    /// One propagation step.
    pub fn apply(&self, h: &Grid) -> Result<Grid> {
        self.ensure_matches(h)?;
        let mut out = Grid::zeros(self.width, self.height, 1);
        self.apply_into(h.data(), out.data_mut());
        Ok(out)
    }

    pub(crate) fn apply_into(&self, src: &[f64], dst: &mut [f64]) {
        let n = self.kernel.neighbors();
        for (p, o) in dst.iter_mut().enumerate() {
            let w = &self.weights[p * (n + 1)..(p + 1) * (n + 1)];
            let taps = &self.taps[p * n..(p + 1) * n];
            let mut acc = w[0] * src[p];
            for (t, &wj) in taps.iter().zip(&w[1..]) {
                acc += wj * t.interpolate(|i| src[i]);
            }
            *o = acc;
        }
    }

    /// `iters` rounds of propagation, each followed by confidence-weighted
    /// replacement with `blend = m * M`.
    pub(crate) fn refine_with_blend(
        &self,
        d0: &Grid,
        ds: &Grid,
        blend: &[f64],
        iters: usize,
        mut record: impl FnMut(&Grid),
    ) -> Grid {
        let mut h = d0.clone();
        let mut next = Grid::zeros(self.width, self.height, 1);
        for _ in 0..iters {
            record(&h);
            self.apply_into(h.data(), next.data_mut());
            soft_replace_into(next.data_mut(), ds.data(), blend);
            std::mem::swap(&mut h, &mut next);
        }
        h
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One deformable propagation step of a single-channel `h`.
pub fn dspn_step(
    h: &Grid,
    features: &FeatureGrid,
    offsets: &OffsetField,
    emb: &EmbeddingParams,
) -> Result<Grid> {
    DspnOperator::new(features, offsets, emb)?.apply(h)
}

pub(crate) fn validate_refine_inputs(d0: &Grid, ds: &Grid, m: &Grid, conf: &Grid) -> Result<()> {
    d0.ensure_single_channel("coarse depth")?;
    d0.ensure_same_shape(ds, "dspn_refine sparse")?;
    d0.ensure_same_shape(m, "dspn_refine mask")?;
    d0.ensure_same_shape(conf, "dspn_refine confidence")?;
    crate::cspn::ensure_binary_mask(m)?;
    crate::confidence::ensure_unit_interval(conf)
}

/// Per-pixel `m * M` blend factors.
pub(crate) fn blend_factors(m: &Grid, conf: &Grid) -> Vec<f64> {
    m.data()
        .iter()
        .zip(conf.data())
        .map(|(a, b)| a * b)
        .collect()
}

/// `iters` rounds of [`dspn_step`] followed by confidence-weighted
/// replacement. The offset field is fixed for all rounds.
#[allow(clippy::too_many_arguments)]
pub fn dspn_refine(
    d0: &Grid,
    ds: &Grid,
    m: &Grid,
    conf: &Grid,
    features: &FeatureGrid,
    offsets: &OffsetField,
    emb: &EmbeddingParams,
    iters: usize,
) -> Result<Grid> {
    validate_refine_inputs(d0, ds, m, conf)?;
    let op = DspnOperator::new(features, offsets, emb)?;
    op.ensure_matches(d0)?;
    Ok(op.refine_with_blend(d0, ds, &blend_factors(m, conf), iters, |_| {}))
}
