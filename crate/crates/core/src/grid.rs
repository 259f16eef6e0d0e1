//! Dense row-major grids and border-clamped bilinear sampling.
//!
//! Coordinates: `x` is the column, `y` the row, origin at the top-left pixel
//! centre. Storage order is `(y, x, c)`, so the value at `(x, y, c)` lives at
//! `(y * width + x) * channels + c`.

use crate::error::{Error, Result};

/// Continuous pixel coordinate. May lie outside the image; sampling clamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousPos {
    pub x: f64,
    pub y: f64,
}

impl ContinuousPos {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A `width x height x channels` field of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidGrid(format!(
                "{}x{}x{} grid needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a single-channel grid by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// Reads `(x, y, c)` with integer coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// The per-pixel channel vector at `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn ensure_single_channel(&self, what: &str) -> Result<()> {
        if self.channels == 1 {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what} must have one channel, has {}",
                self.channels
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two grids of identical shape.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies channel `c` into a new single-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        Grid {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear interpolation of channel `c` at `p`, with the four source
    /// coordinates clamped to the border.
    pub fn bilinear_sample(&self, p: ContinuousPos, c: usize) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::InvalidGrid("cannot sample an empty grid".into()));
        }
        if c >= self.channels {
            return Err(Error::InvalidGrid(format!(
                "channel {c} out of range for {} channels",
                self.channels
            )));
        }
        if !p.is_finite() {
            return Err(Error::InvalidPosition { x: p.x, y: p.y });
        }
        Ok(self.sample(p, c))
    }

    /// Unchecked variant of [`Grid::bilinear_sample`] for hot loops.
    #[inline]
    pub fn sample(&self, p: ContinuousPos, c: usize) -> f64 {
        let taps = BilinearTaps::new(self.width, self.height, p);
        taps.interpolate(|pix| self.data[pix * self.channels + c])
    }
}

/// The four clamped source pixels of a bilinear read and their weights.
///
/// `pixel[k]` are flat pixel indices (`y * width + x`) in the order
/// `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`. `fx`/`fy` are the fractional parts
/// of the unclamped position; at exact lattice coordinates they are 0, which
/// makes [`BilinearTaps::grad_weights`] the right-sided derivative.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub pixel: [usize; 4],
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTaps {
    #[inline]
    pub fn new(width: usize, height: usize, p: ContinuousPos) -> Self {
        let (x0, x1, fx) = axis(p.x, width);
        let (y0, y1, fy) = axis(p.y, height);
        Self {
            pixel: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            fx,
            fy,
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    /// Derivatives of the four weights with respect to `p.x` and `p.y`.
    #[inline]
    pub fn grad_weights(&self) -> ([f64; 4], [f64; 4]) {
        let (fx, fy) = (self.fx, self.fy);
        (
            [-(1.0 - fy), 1.0 - fy, -fy, fy],
            [-(1.0 - fx), -fx, 1.0 - fx, fx],
        )
    }

    #[inline]
    pub fn interpolate(&self, value: impl Fn(usize) -> f64) -> f64 {
        let w = self.weights();
        w[0] * value(self.pixel[0])
            + w[1] * value(self.pixel[1])
            + w[2] * value(self.pixel[2])
            + w[3] * value(self.pixel[3])
    }

    /// `(d/dx, d/dy)` of the interpolated value.
    #[inline]
    pub fn spatial_gradient(&self, value: impl Fn(usize) -> f64) -> (f64, f64) {
        let v = [
            value(self.pixel[0]),
            value(self.pixel[1]),
            value(self.pixel[2]),
            value(self.pixel[3]),
        ];
        let (fx, fy) = (self.fx, self.fy);
        (
            (1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]),
            (1.0 - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]),
        )
    }
}

#[inline]
fn axis(coord: f64, len: usize) -> (usize, usize, f64) {
    let base = coord.floor();
    let frac = coord - base;
    let hi = len as f64 - 1.0;
    let lo0 = base.clamp(0.0, hi) as usize;
    let lo1 = (base + 1.0).clamp(0.0, hi) as usize;
    // Both taps on the same clamped pixel: the field is flat here.
    let frac = if lo0 == lo1 { 0.0 } else { frac };
    (lo0, lo1, frac)
}
