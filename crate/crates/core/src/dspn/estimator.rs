//! Three-layer 3x3 convolutional offset estimator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureGrid, OffsetField};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::neighborhood::KernelSize;

/// A 3x3, stride-1 convolution with border-replicated padding.
///
/// `weight` is laid out `[out][ky][kx][in]` so that one output channel is a
/// dot product with a contiguous 3x3 input patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * 9 * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    fn he_normal(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (9 * in_channels) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut layer = Self::zeros(in_channels, out_channels);
        for w in &mut layer.weight {
            *w = normal.sample(rng);
        }
        layer
    }

    fn patch_len(&self) -> usize {
        9 * self.in_channels
    }

    pub fn forward(&self, input: &Grid, relu: bool) -> Grid {
        let (w, h) = (input.width(), input.height());
        let mut out = Grid::zeros(w, h, self.out_channels);
        let mut patch = vec![0.0; self.patch_len()];
        let mut src = [0usize; 9];
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                gather_patch(input, x, y, &mut src, &mut patch);
                let p = y * w + x;
                for o in 0..self.out_channels {
                    let row = &self.weight[o * patch.len()..(o + 1) * patch.len()];
                    let v = self.bias[o] + dot4(row, &patch);
                    dst[p * self.out_channels + o] = if relu { v.max(0.0) } else { v };
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    fn backward(
        &self,
        input: &Grid,
        d_out: &Grid,
        grad: &mut ConvLayer,
        want_input: bool,
    ) -> Option<Grid> {
        let (w, h) = (input.width(), input.height());
        let cin = self.in_channels;
        let mut d_in = want_input.then(|| Grid::zeros(w, h, cin));
        let mut patch = vec![0.0; self.patch_len()];
        let mut d_patch = vec![0.0; self.patch_len()];
        let mut src = [0usize; 9];
        for y in 0..h {
            for x in 0..w {
                gather_patch(input, x, y, &mut src, &mut patch);
                let p = y * w + x;
                let g_out = &d_out.data()[p * self.out_channels..(p + 1) * self.out_channels];
                if want_input {
                    d_patch.fill(0.0);
                }
                for (o, &g) in g_out.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[o] += g;
                    let range = o * patch.len()..(o + 1) * patch.len();
                    axpy(g, &patch, &mut grad.weight[range.clone()]);
                    if want_input {
                        axpy(g, &self.weight[range], &mut d_patch);
                    }
                }
                if let Some(d_in) = d_in.as_mut() {
                    let data = d_in.data_mut();
                    for (t, &s) in src.iter().enumerate() {
                        for c in 0..cin {
                            data[s * cin + c] += d_patch[t * cin + c];
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[inline]
fn gather_patch(input: &Grid, x: usize, y: usize, src: &mut [usize; 9], patch: &mut [f64]) {
    let (w, h, c) = (input.width(), input.height(), input.channels());
    let mut t = 0;
    for ky in 0..3 {
        let sy = (y + ky).saturating_sub(1).min(h - 1);
        for kx in 0..3 {
            let sx = (x + kx).saturating_sub(1).min(w - 1);
            let s = sy * w + sx;
            src[t] = s;
            patch[t * c..(t + 1) * c].copy_from_slice(&input.data()[s * c..(s + 1) * c]);
            t += 1;
        }
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EstimatorActivations {
    hidden1: Grid,
    hidden2: Grid,
}

/// Parameters of the offset estimator: conv(d_F -> h), ReLU, conv(h -> h),
/// ReLU, conv(h -> 2(k*k-1)).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEstimatorParams {
    kernel: KernelSize,
    layers: [ConvLayer; 3],
}

impl OffsetEstimatorParams {
    /// He-normal hidden layers from `seed`; the output layer starts at zero so
    /// the initial offsets vanish.
    pub fn new(feature_dim: usize, hidden: usize, kernel: KernelSize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = ConvLayer::he_normal(feature_dim, hidden, &mut rng);
        let l2 = ConvLayer::he_normal(hidden, hidden, &mut rng);
        let l3 = ConvLayer::zeros(hidden, 2 * kernel.neighbors());
        Self {
            kernel,
            layers: [l1, l2, l3],
        }
    }

    pub fn from_layers(kernel: KernelSize, layers: [ConvLayer; 3]) -> Result<Self> {
        let [a, b, c] = &layers;
        let shapes_ok = a.out_channels == b.in_channels
            && b.out_channels == c.in_channels
            && c.out_channels == 2 * kernel.neighbors()
            && layers.iter().all(|l| {
                l.weight.len() == l.out_channels * 9 * l.in_channels
                    && l.bias.len() == l.out_channels
            });
        if !shapes_ok {
            return Err(Error::ShapeMismatch(
                "offset estimator layers do not chain".into(),
            ));
        }
        Ok(Self { kernel, layers })
    }

    /// Same shapes, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: self.kernel,
            layers: self
                .layers
                .clone()
                .map(|l| ConvLayer::zeros(l.in_channels, l.out_channels)),
        }
    }

    pub fn kernel(&self) -> KernelSize {
        self.kernel
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].out_channels
    }

    pub fn layers(&self) -> &[ConvLayer; 3] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer; 3] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, weights before biases.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "estimator has {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&values[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn check_features(&self, features: &FeatureGrid) -> Result<()> {
        if features.dim() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects {} feature channels, got {}",
                self.feature_dim(),
                features.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, features: &FeatureGrid) -> Result<OffsetField> {
        Ok(self.forward_cached(features)?.0)
    }

    pub fn forward_cached(
        &self,
        features: &FeatureGrid,
    ) -> Result<(OffsetField, EstimatorActivations)> {
        self.check_features(features)?;
        let hidden1 = self.layers[0].forward(features.grid(), true);
        let hidden2 = self.layers[1].forward(&hidden1, true);
        let out = self.layers[2].forward(&hidden2, false);
        let offsets = OffsetField::from_grid(out, self.kernel)?;
        Ok((offsets, EstimatorActivations { hidden1, hidden2 }))
    }

    /// Parameter gradients given the loss gradient with respect to the
    /// produced offsets.
    pub fn backward(
        &self,
        features: &FeatureGrid,
        acts: &EstimatorActivations,
        d_offsets: &OffsetField,
    ) -> Result<OffsetEstimatorParams> {
        self.check_features(features)?;
        if d_offsets.kernel() != self.kernel
            || d_offsets.width() != acts.hidden2.width()
            || d_offsets.height() != acts.hidden2.height()
        {
            return Err(Error::ShapeMismatch(
                "offset gradient does not match estimator output".into(),
            ));
        }
        let mut grad = self.zeros_like();
        let d_out = d_offsets.clone().into_grid();
        let [g1, g2, g3] = &mut grad.layers;
        let mut d_h2 = self.layers[2]
            .backward(&acts.hidden2, &d_out, g3, true)
            .expect("input gradient requested");
        relu_backward(&acts.hidden2, &mut d_h2);
        let mut d_h1 = self.layers[1]
            .backward(&acts.hidden1, &d_h2, g2, true)
            .expect("input gradient requested");
        relu_backward(&acts.hidden1, &mut d_h1);
        self.layers[0].backward(features.grid(), &d_h1, g1, false);
        Ok(grad)
    }
}

fn relu_backward(activation: &Grid, grad: &mut Grid) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
