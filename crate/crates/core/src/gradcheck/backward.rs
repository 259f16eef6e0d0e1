use crate::dspn::{
    blend_factors, validate_refine_inputs, DspnOperator, EmbeddingParams, FeatureGrid, OffsetField,
};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Gradients of a scalar loss with respect to the inputs of a recorded
/// propagation.
#[derive(Debug, Clone)]
pub struct DspnGradients {
    /// With respect to the initial state (`H_t` for a single step, `D_0` for
    /// a refinement).
    pub d_input: Grid,
    pub d_theta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub d_offsets: OffsetField,
}

/// Forward state of one or more propagation steps sharing one operator.
///
/// Replacement blocks the gradient towards the sensor values and passes
/// `(1 - m*M)` of it to the propagated state.
#[derive(Debug, Clone)]
pub struct DspnTape {
    op: DspnOperator,
    features: FeatureGrid,
    emb: EmbeddingParams,
    states: Vec<Grid>,
    blend: Option<Vec<f64>>,
}

impl DspnTape {
    pub fn new(
        features: &FeatureGrid,
        offsets: &OffsetField,
        emb: &EmbeddingParams,
    ) -> Result<Self> {
        Ok(Self {
            op: DspnOperator::new(features, offsets, emb)?,
            features: features.clone(),
            emb: emb.clone(),
            states: Vec::new(),
            blend: None,
        })
    }

    pub fn operator(&self) -> &DspnOperator {
        &self.op
    }

    /// Records and runs a single step without replacement.
    pub fn step(&mut self, h: &Grid) -> Result<Grid> {
        let out = self.op.apply(h)?;
        self.states = vec![h.clone()];
        self.blend = None;
        Ok(out)
    }

    /// Records and runs `iters` rounds of step plus soft replacement.
    pub fn refine(
        &mut self,
        d0: &Grid,
        ds: &Grid,
        m: &Grid,
        conf: &Grid,
        iters: usize,
    ) -> Result<Grid> {
        validate_refine_inputs(d0, ds, m, conf)?;
        if d0.width() != self.op.width() || d0.height() != self.op.height() {
            return Err(Error::ShapeMismatch(
                "refine input does not match operator".into(),
            ));
        }
        let blend = blend_factors(m, conf);
        let mut states = Vec::with_capacity(iters);
        let out = self
            .op
            .refine_with_blend(d0, ds, &blend, iters, |h| states.push(h.clone()));
        self.states = states;
        self.blend = Some(blend);
        Ok(out)
    }

    /// Reverse pass for the most recent [`DspnTape::step`] or
    /// [`DspnTape::refine`].
    pub fn backward(&self, grad_out: &Grid) -> Result<DspnGradients> {
        let op = &self.op;
        let (w, h) = (op.width(), op.height());
        if self.states.is_empty() {
            if self.blend.is_some() {
                // Zero-iteration refinement is the identity.
                return Ok(self.zero_gradients(grad_out.clone()));
            }
            return Err(Error::InvalidState("no forward pass recorded".into()));
        }
        if grad_out.width() != w || grad_out.height() != h || grad_out.channels() != 1 {
            return Err(Error::ShapeMismatch(
                "upstream gradient does not match output".into(),
            ));
        }
        let n = op.kernel().neighbors();
        let pixels = w * h;
        let weights = op.raw_weights();
        let taps = op.taps();

        let mut d_weights = vec![0.0; pixels * (n + 1)];
        let mut d_pos = vec![0.0; pixels * n * 2];
        let mut g = grad_out.data().to_vec();
        let mut next = vec![0.0; pixels];

        for state in self.states.iter().rev() {
            if let Some(blend) = &self.blend {
                for (gi, b) in g.iter_mut().zip(blend) {
                    *gi *= 1.0 - b;
                }
            }
            let hv = state.data();
            next.fill(0.0);
            for i in 0..pixels {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                let wi = &weights[i * (n + 1)..(i + 1) * (n + 1)];
                let dwi = &mut d_weights[i * (n + 1)..(i + 1) * (n + 1)];
                dwi[0] += gi * hv[i];
                next[i] += gi * wi[0];
                for j in 0..n {
                    let t = &taps[i * n + j];
                    let val = |p: usize| hv[p];
                    dwi[j + 1] += gi * t.interpolate(val);
                    let scale = gi * wi[j + 1];
                    let tw = t.weights();
                    for c in 0..4 {
                        next[t.pixel[c]] += scale * tw[c];
                    }
                    let (gx, gy) = t.spatial_gradient(val);
                    d_pos[(i * n + j) * 2] += scale * gx;
                    d_pos[(i * n + j) * 2 + 1] += scale * gy;
                }
            }
            std::mem::swap(&mut g, &mut next);
        }
        let d_input = Grid::from_vec(w, h, 1, g)?;

        // Softmax, projections and the key path of the sample positions.
        let e = self.emb.embed_dim();
        let d = self.emb.feature_dim();
        let s = op.scale();
        let f = self.features.grid();
        let keys = op.keys();
        let kd = keys.data();
        let queries = op.queries();
        let mut d_theta = vec![0.0; e * d];
        let mut d_phi = vec![0.0; e * d];
        let mut d_logit = vec![0.0; n + 1];
        let mut dq = vec![0.0; e];
        let mut dk = vec![0.0; e];
        let mut fs = vec![0.0; d];
        for i in 0..pixels {
            let wi = &weights[i * (n + 1)..(i + 1) * (n + 1)];
            let dwi = &d_weights[i * (n + 1)..(i + 1) * (n + 1)];
            let mean: f64 = wi.iter().zip(dwi).map(|(a, b)| a * b).sum();
            for j in 0..=n {
                d_logit[j] = wi[j] * (dwi[j] - mean);
            }
            let q = &queries[i * e..(i + 1) * e];
            let fi = f.pixel(i % w, i / w);

            // Self term: key is g_phi F(x_i).
            let key = &kd[i * e..(i + 1) * e];
            for a in 0..e {
                dq[a] = s * d_logit[0] * key[a];
                dk[a] = s * d_logit[0] * q[a];
            }
            outer_add(&mut d_phi, &dk, fi);

            for j in 0..n {
                let t = &taps[i * n + j];
                let dl = d_logit[j + 1];
                if dl == 0.0 {
                    continue;
                }
                let tw = t.weights();
                for a in 0..e {
                    let k = tw[0] * kd[t.pixel[0] * e + a]
                        + tw[1] * kd[t.pixel[1] * e + a]
                        + tw[2] * kd[t.pixel[2] * e + a]
                        + tw[3] * kd[t.pixel[3] * e + a];
                    dq[a] += s * dl * k;
                    dk[a] = s * dl * q[a];
                }
                for (c, v) in fs.iter_mut().enumerate() {
                    *v = t.interpolate(|p| f.data()[p * d + c]);
                }
                outer_add(&mut d_phi, &dk, &fs);
                let (gwx, gwy) = t.grad_weights();
                let mut gx = 0.0;
                let mut gy = 0.0;
                for c in 0..4 {
                    let kc = &kd[t.pixel[c] * e..(t.pixel[c] + 1) * e];
                    let v: f64 = dk.iter().zip(kc).map(|(a, b)| a * b).sum();
                    gx += gwx[c] * v;
                    gy += gwy[c] * v;
                }
                d_pos[(i * n + j) * 2] += gx;
                d_pos[(i * n + j) * 2 + 1] += gy;
            }
            outer_add(&mut d_theta, &dq, fi);
        }

        Ok(DspnGradients {
            d_input,
            d_theta,
            d_phi,
            d_offsets: OffsetField::new(w, h, op.kernel(), d_pos)?,
        })
    }

    fn zero_gradients(&self, d_input: Grid) -> DspnGradients {
        let n = self.emb.embed_dim() * self.emb.feature_dim();
        DspnGradients {
            d_input,
            d_theta: vec![0.0; n],
            d_phi: vec![0.0; n],
            d_offsets: OffsetField::zeros(self.op.width(), self.op.height(), self.op.kernel()),
        }
    }
}

/// `m += a b^T` for row-major `m`.
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in m.chunks_exact_mut(b.len()).zip(a) {
        if ai == 0.0 {
            continue;
        }
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

/// Reverse pass of the step or refinement recorded on `tape`.
pub fn dspn_backward(grad_out: &Grid, tape: &DspnTape) -> Result<DspnGradients> {
    tape.backward(grad_out)
}
