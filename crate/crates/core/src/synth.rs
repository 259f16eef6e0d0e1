//! Synthetic depth scenes, sparse sampling and deterministic stand-ins for a
//! learned coarse predictor and feature extractor.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`. Scene `i` of a
//! suite uses seed `base + i` for geometry and `(base + i) ^ SPARSE_SEED_SALT`
//! for sparse sampling.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dspn::FeatureGrid;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const SPARSE_SEED_SALT: u64 = 0x5DEE_CE66_D1CE_B00C;

/// Smallest depth a noisy measurement is allowed to take (meters).
pub const MIN_MEASURED_DEPTH: f64 = 1e-3;

/// Number of hand-crafted feature channels before padding.
pub const BASE_FEATURE_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Plane,
    Step,
    Slope,
    SphereCap,
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::Composite,
            width: 64,
            height: 64,
            depth_min: 1.0,
            depth_max: 10.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidSpec(format!(
                "scene must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min && self.depth_max.is_finite())
        {
            return Err(Error::InvalidSpec(format!(
                "invalid depth range [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSpec {
    pub density: f64,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_sigma: f64,
    pub seed: u64,
}

impl Default for SparseSpec {
    fn default() -> Self {
        Self {
            density: 0.05,
            noise_sigma: 0.02,
            outlier_fraction: 0.1,
            outlier_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SparseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.density > 0.0
            && self.density <= 1.0
            && self.noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.outlier_fraction)
            && self.outlier_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("invalid sparse spec {self:?}")))
        }
    }
}

/// Axis-aligned or rotated half-plane split; returns true on the "near" side.
fn half_plane(x: f64, y: f64, cx: f64, cy: f64, angle: f64) -> bool {
    (x - cx) * angle.cos() + (y - cy) * angle.sin() < 0.0
}

fn slope_plane(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    lo: f64,
    hi: f64,
) -> impl Fn(f64, f64) -> f64 {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (angle.cos(), angle.sin());
    let corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (0.0, h as f64 - 1.0),
        (w as f64 - 1.0, h as f64 - 1.0),
    ];
    let proj: Vec<f64> = corners.iter().map(|(x, y)| x * c + y * s).collect();
    let tmin = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let tmax = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    move |x, y| {
        let t = if tmax > tmin {
            (x * c + y * s - tmin) / (tmax - tmin)
        } else {
            0.0
        };
        lo + t * (hi - lo)
    }
}

/// Dense ground-truth depth for `spec`.
pub fn gen_scene(spec: &SceneSpec) -> Result<Grid> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let (lo, hi) = (spec.depth_min, spec.depth_max);
    let (wf, hf) = (w as f64, h as f64);
    let grid = match spec.kind {
        SceneKind::Plane => {
            let d = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            Grid::filled(w, h, 1, d)
        }
        SceneKind::Step => {
            let angle = [
                0.0,
                std::f64::consts::FRAC_PI_2,
                std::f64::consts::FRAC_PI_4,
            ][rng.random_range(0..3)];
            let cx = rng.random_range(0.3 * wf..0.7 * wf);
            let cy = rng.random_range(0.3 * hf..0.7 * hf);
            Grid::from_fn(w, h, |x, y| {
                if half_plane(x as f64, y as f64, cx, cy, angle) {
                    lo
                } else {
                    hi
                }
            })
        }
        SceneKind::Slope => {
            let f = slope_plane(&mut rng, w, h, lo, hi);
            Grid::from_fn(w, h, |x, y| f(x as f64, y as f64))
        }
        SceneKind::SphereCap => {
            let mut g = Grid::filled(w, h, 1, hi);
            paint_cap(&mut g, &mut rng, lo, hi);
            g
        }
        SceneKind::Composite => composite(&mut rng, w, h, lo, hi),
    };
    Ok(grid.map(|v| v.clamp(lo, hi)))
}

fn paint_cap(g: &mut Grid, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    let (wf, hf) = (g.width() as f64, g.height() as f64);
    let r = rng.random_range(wf.min(hf) / 6.0..wf.min(hf) / 3.0);
    let cx = rng.random_range(r..wf - r);
    let cy = rng.random_range(r..hf - r);
    let base = rng.random_range(lo + 0.3 * (hi - lo)..=hi);
    let height = (base - lo) * rng.random_range(0.3..0.9);
    for y in 0..g.height() {
        for x in 0..g.width() {
            let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
            if d2 < 1.0 {
                let v = base - height * (1.0 - d2).sqrt();
                if v < g.get(x, y, 0) {
                    g.set(x, y, 0, v);
                }
            }
        }
    }
}

/// Slanted background, a diagonal foreground slab, axis-aligned boxes at
/// assorted depths and a spherical cap, painted back to front.
fn composite(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Grid {
    let (wf, hf) = (w as f64, h as f64);
    let span = hi - lo;
    let bg = slope_plane(rng, w, h, lo + 0.55 * span, hi);
    let mut g = Grid::from_fn(w, h, |x, y| bg(x as f64, y as f64));

    // Diagonal slab: everything on one side of a tilted line becomes a
    // slanted surface closer to the camera.
    let angle = rng.random_range(0.15..0.85) * std::f64::consts::FRAC_PI_2
        + std::f64::consts::FRAC_PI_2 * rng.random_range(0..4) as f64;
    let cx = rng.random_range(0.25 * wf..0.75 * wf);
    let cy = rng.random_range(0.25 * hf..0.75 * hf);
    let slab = slope_plane(rng, w, h, lo + 0.3 * span, lo + 0.55 * span);
    for y in 0..h {
        for x in 0..w {
            if half_plane(x as f64, y as f64, cx, cy, angle) {
                g.set(x, y, 0, slab(x as f64, y as f64));
            }
        }
    }

    let boxes = rng.random_range(2..5);
    for _ in 0..boxes {
        let bw = rng.random_range(0.12 * wf..0.35 * wf);
        let bh = rng.random_range(0.12 * hf..0.35 * hf);
        let x0 = rng.random_range(0.0..wf - bw);
        let y0 = rng.random_range(0.0..hf - bh);
        let d = rng.random_range(lo..lo + 0.6 * span);
        let tilt = rng.random_range(-0.02..0.02) * span;
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                if xf >= x0 && xf < x0 + bw && yf >= y0 && yf < y0 + bh {
                    g.set(x, y, 0, d + tilt * (xf - x0));
                }
            }
        }
    }
    paint_cap(&mut g, rng, lo, hi);
    g
}

/// Keeps each pixel with probability `density`; kept pixels get Gaussian
/// noise and, for a sub-fraction, extra outlier noise. Returns `(Ds, m)`.
pub fn sample_sparse(dstar: &Grid, spec: &SparseSpec) -> Result<(Grid, Grid)> {
    spec.validate()?;
    dstar.ensure_single_channel("ground truth")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = Grid::zeros(dstar.width(), dstar.height(), 1);
    let mut m = Grid::zeros(dstar.width(), dstar.height(), 1);
    for (i, &d) in dstar.data().iter().enumerate() {
        let keep = rng.random::<f64>() < spec.density;
        if !keep {
            continue;
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        let outlier = rng.random::<f64>() < spec.outlier_fraction;
        let extra: f64 = StandardNormal.sample(&mut rng);
        let mut v = d;
        if spec.noise_sigma > 0.0 {
            v += spec.noise_sigma * noise;
        }
        if outlier && spec.outlier_sigma > 0.0 {
            v += spec.outlier_sigma * extra;
        }
        ds.data_mut()[i] = v.max(MIN_MEASURED_DEPTH);
        m.data_mut()[i] = 1.0;
    }
    Ok((ds, m))
}

/// Index of the nearest valid pixel to every pixel; ties go to the smaller
/// raster index.
pub fn nearest_valid(m: &Grid) -> Result<Vec<usize>> {
    let (w, h) = (m.width() as isize, m.height() as isize);
    if !m.data().contains(&1.0) {
        return Err(Error::EmptySparse);
    }
    let valid = |x: isize, y: isize| {
        x >= 0 && y >= 0 && x < w && y < h && m.data()[(y * w + x) as usize] == 1.0
    };
    let mut out = Vec::with_capacity(m.pixels());
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(isize, usize)> = None;
            let mut r = 0isize;
            // Pixels on ring r are at least r away, so stop once r^2 exceeds
            // the best squared distance.
            while best.is_none_or(|(d2, _)| r * r <= d2) && r <= w.max(h) {
                for yy in (y - r)..=(y + r) {
                    let step = if yy == y - r || yy == y + r {
                        1
                    } else {
                        (2 * r).max(1)
                    };
                    let mut xx = x - r;
                    while xx <= x + r {
                        if valid(xx, yy) {
                            let d2 = (xx - x).pow(2) + (yy - y).pow(2);
                            let idx = (yy * w + xx) as usize;
                            if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                                best = Some((d2, idx));
                            }
                        }
                        xx += step;
                    }
                }
                r += 1;
            }
            out.push(best.expect("at least one valid pixel").1);
        }
    }
    Ok(out)
}

/// 3x3 mean with border-clamped reads.
pub fn box_blur(g: &Grid) -> Grid {
    let mut out = Grid::zeros(g.width(), g.height(), g.channels());
    for y in 0..g.height() {
        for x in 0..g.width() {
            for c in 0..g.channels() {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        s += g.get_clamped(x as isize + dx, y as isize + dy, c);
                    }
                }
                out.set(x, y, c, s / 9.0);
            }
        }
    }
    out
}

/// Coarse dense depth: nearest-valid fill, then two 3x3 box blurs.
pub fn coarse_predict(ds: &Grid, m: &Grid) -> Result<Grid> {
    ds.ensure_single_channel("sparse depth")?;
    ds.ensure_same_shape(m, "coarse_predict mask")?;
    let nearest = nearest_valid(m)?;
    let filled = Grid::from_vec(
        ds.width(),
        ds.height(),
        1,
        nearest.iter().map(|&i| ds.data()[i]).collect(),
    )?;
    Ok(box_blur(&box_blur(&filled)))
}

/// Hand-crafted feature map: normalized depth, its absolute x/y central
/// differences, the sparse mask, normalized column and row, and a constant
/// channel; zero-padded (or truncated) to `dim` channels.
pub fn build_features(d0: &Grid, m: &Grid, dim: usize) -> Result<FeatureGrid> {
    d0.ensure_single_channel("coarse depth")?;
    d0.ensure_same_shape(m, "build_features mask")?;
    if dim == 0 {
        return Err(Error::InvalidConfig(
            "feature dimension must be >= 1".into(),
        ));
    }
    let (w, h) = (d0.width(), d0.height());
    let (lo, hi) = (d0.min(), d0.max());
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let mut out = Grid::zeros(w, h, dim);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx =
                0.5 * (norm(d0.get_clamped(xi + 1, yi, 0)) - norm(d0.get_clamped(xi - 1, yi, 0)));
            let gy =
                0.5 * (norm(d0.get_clamped(xi, yi + 1, 0)) - norm(d0.get_clamped(xi, yi - 1, 0)));
            let channels = [
                norm(d0.get(x, y, 0)),
                gx.abs(),
                gy.abs(),
                m.get(x, y, 0),
                x as f64 / w as f64,
                y as f64 / h as f64,
                1.0,
            ];
            for (c, v) in channels.iter().take(dim).enumerate() {
                out.set(x, y, c, *v);
            }
        }
    }
    FeatureGrid::new(out)
}
