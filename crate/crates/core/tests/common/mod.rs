//! Scalar reference implementations and seeded instance generators shared by
//! the integration tests.

#![allow(dead_code)]

use dspn_core::cspn::AffinityStencilField;
use dspn_core::dspn::{EmbeddingParams, FeatureGrid, OffsetField};
use dspn_core::{Grid, KernelSize};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(r: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Grid {
    let data = (0..w * h * c).map(|_| r.random_range(lo..hi)).collect();
    Grid::from_vec(w, h, c, data).unwrap()
}

pub fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Grid {
    let data = (0..w * h)
        .map(|_| if r.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Grid::from_vec(w, h, 1, data).unwrap()
}

/// A random propagation problem of size 5x5 to 8x8.
pub struct Instance {
    pub w: usize,
    pub h: usize,
    pub kernel: KernelSize,
    pub state: Grid,
    pub sparse: Grid,
    pub mask: Grid,
    pub conf: Grid,
    pub stencils: AffinityStencilField,
    pub features: FeatureGrid,
    pub offsets: OffsetField,
    pub emb: EmbeddingParams,
}

impl Instance {
    pub fn random(seed: u64, kernel: KernelSize) -> Instance {
        let mut r = rng(seed);
        let w = r.random_range(5..=8);
        let h = r.random_range(5..=8);
        let n = kernel.neighbors();
        let d = r.random_range(1..=6);
        let e = r.random_range(1..=6);
        let stencil_data = (0..w * h * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let offsets = (0..w * h * 2 * n)
            .map(|_| r.random_range(-2.5..2.5))
            .collect();
        let theta = (0..e * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let phi = (0..e * d).map(|_| r.random_range(-1.0..1.0)).collect();
        Instance {
            w,
            h,
            kernel,
            state: random_grid(&mut r, w, h, 1, 0.5, 10.0),
            sparse: random_grid(&mut r, w, h, 1, 0.5, 10.0),
            mask: random_mask(&mut r, w, h, 0.3),
            conf: random_grid(&mut r, w, h, 1, 0.0, 1.0),
            stencils: AffinityStencilField::new(w, h, kernel, stencil_data).unwrap(),
            features: FeatureGrid::new(random_grid(&mut r, w, h, d, -1.0, 1.0)).unwrap(),
            offsets: OffsetField::new(w, h, kernel, offsets).unwrap(),
            emb: EmbeddingParams::new(e, d, theta, phi).unwrap(),
        }
    }
}

fn clampi(v: i64, len: usize) -> usize {
    v.clamp(0, len as i64 - 1) as usize
}

/// Border-clamped bilinear interpolation, written out directly.
pub fn bilinear(g: &Grid, x: f64, y: f64, c: usize) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| g.get(clampi(xi, g.width()), clampi(yi, g.height()), c);
    (1.0 - fx) * (1.0 - fy) * at(x0, y0)
        + fx * (1.0 - fy) * at(x0 + 1, y0)
        + (1.0 - fx) * fy * at(x0, y0 + 1)
        + fx * fy * at(x0 + 1, y0 + 1)
}

fn ring(kernel: KernelSize) -> Vec<(i64, i64)> {
    let r = (kernel.get() / 2) as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx, dy) != (0, 0) {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn cspn_step(h: &Grid, s: &AffinityStencilField) -> Grid {
    let (w, ht) = (h.width(), h.height());
    let ring = ring(s.kernel());
    let n = ring.len();
    let mut out = Grid::zeros(w, ht, 1);
    for y in 0..ht {
        for x in 0..w {
            let raw = &s.data()[(y * w + x) * n..(y * w + x + 1) * n];
            let total: f64 = raw.iter().map(|v| v.abs()).sum();
            if total == 0.0 {
                out.set(x, y, 0, h.get(x, y, 0));
                continue;
            }
            let mut acc = 0.0;
            let mut self_w = 1.0;
            for (j, &(dx, dy)) in ring.iter().enumerate() {
                let k = raw[j] / total;
                self_w -= k;
                acc += k * h.get(clampi(x as i64 + dx, w), clampi(y as i64 + dy, ht), 0);
            }
            out.set(x, y, 0, acc + self_w * h.get(x, y, 0));
        }
    }
    out
}

pub fn hard_replace(h: &Grid, ds: &Grid, m: &Grid) -> Grid {
    let mut out = h.clone();
    for i in 0..h.data().len() {
        if m.data()[i] == 1.0 {
            out.data_mut()[i] = ds.data()[i];
        }
    }
    out
}

pub fn cspn_refine(d0: &Grid, ds: &Grid, m: &Grid, s: &AffinityStencilField, iters: usize) -> Grid {
    let mut h = d0.clone();
    for _ in 0..iters {
        h = hard_replace(&cspn_step(&h, s), ds, m);
    }
    h
}

/// Softmax weights `[self, neighbours...]` and the neighbour positions of
/// pixel `(x, y)`.
pub fn dspn_weights(
    f: &FeatureGrid,
    off: &OffsetField,
    emb: &EmbeddingParams,
    x: usize,
    y: usize,
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let fg = f.grid();
    let (w, d, e) = (fg.width(), emb.feature_dim(), emb.embed_dim());
    let ring = ring(off.kernel());
    let n = ring.len();
    let p = y * w + x;
    let feat_at =
        |px: f64, py: f64| -> Vec<f64> { (0..d).map(|c| bilinear(fg, px, py, c)).collect() };
    let project = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..e)
            .map(|a| (0..d).map(|b| m[a * d + b] * v[b]).sum())
            .collect()
    };
    let dotp = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(u, v)| u * v).sum() };
    let fi: Vec<f64> = (0..d).map(|c| fg.get(x, y, c)).collect();
    let q = project(emb.theta(), &fi);
    let scale = 1.0 / (d as f64).sqrt();
    let mut positions = Vec::with_capacity(n);
    let mut logits = vec![dotp(&q, &project(emb.phi(), &fi)) * scale];
    for (j, &(dx, dy)) in ring.iter().enumerate() {
        let ox = off.data()[p * 2 * n + 2 * j];
        let oy = off.data()[p * 2 * n + 2 * j + 1];
        let (px, py) = (x as f64 + dx as f64 + ox, y as f64 + dy as f64 + oy);
        positions.push((px, py));
        logits.push(dotp(&q, &project(emb.phi(), &feat_at(px, py))) * scale);
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    (logits.iter().map(|l| l.exp() / z).collect(), positions)
}

pub fn dspn_step(h: &Grid, f: &FeatureGrid, off: &OffsetField, emb: &EmbeddingParams) -> Grid {
    let (w, ht) = (h.width(), h.height());
    let mut out = Grid::zeros(w, ht, 1);
    for y in 0..ht {
        for x in 0..w {
            let (wts, pos) = dspn_weights(f, off, emb, x, y);
            let mut acc = wts[0] * h.get(x, y, 0);
            for (wj, &(px, py)) in wts[1..].iter().zip(&pos) {
                acc += wj * bilinear(h, px, py, 0);
            }
            out.set(x, y, 0, acc);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dspn_refine(
    d0: &Grid,
    ds: &Grid,
    m: &Grid,
    conf: &Grid,
    f: &FeatureGrid,
    off: &OffsetField,
    emb: &EmbeddingParams,
    iters: usize,
) -> Grid {
    let mut h = d0.clone();
    for _ in 0..iters {
        let step = dspn_step(&h, f, off, emb);
        for i in 0..step.data().len() {
            let b = m.data()[i] * conf.data()[i];
            h.data_mut()[i] = (1.0 - b) * step.data()[i] + b * ds.data()[i];
        }
    }
    h
}

pub fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
