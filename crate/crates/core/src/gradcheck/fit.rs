use rayon::prelude::*;

use super::{DspnTape, ParamVector};
use crate::dspn::{EmbeddingParams, FeatureGrid, OffsetEstimatorParams, OffsetField};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::LossWeights;

/// Inputs and ground truth of one training scene.
#[derive(Debug, Clone)]
pub struct FitScene {
    pub coarse: Grid,
    pub sparse: Grid,
    pub mask: Grid,
    pub confidence: Grid,
    pub features: FeatureGrid,
    pub ground_truth: Grid,
}

/// How sample offsets are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum OffsetModel {
    /// Predicted from the features by the convolutional estimator.
    Estimator(OffsetEstimatorParams),
    /// One free offset field per scene.
    Direct(Vec<OffsetField>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub embedding: EmbeddingParams,
    pub offsets: OffsetModel,
}

impl FitParams {
    pub fn flatten(&self) -> ParamVector {
        let mut segs = vec![
            ("theta".to_string(), self.embedding.theta().to_vec()),
            ("phi".to_string(), self.embedding.phi().to_vec()),
        ];
        match &self.offsets {
            OffsetModel::Estimator(est) => segs.push(("estimator".into(), est.to_vec())),
            OffsetModel::Direct(fields) => {
                for (i, f) in fields.iter().enumerate() {
                    segs.push((format!("offsets{i}"), f.data().to_vec()));
                }
            }
        }
        ParamVector::new(segs)
    }

    /// Rebuilds parameters shaped like `self` from `v`.
    pub fn unflatten(&self, v: &ParamVector) -> Result<FitParams> {
        if !self.flatten().same_layout(v) {
            return Err(Error::ShapeMismatch(
                "parameter vector layout differs".into(),
            ));
        }
        let mut out = self.clone();
        let seg = |name: &str| v.segment(name).expect("layout checked");
        out.embedding.theta_mut().copy_from_slice(seg("theta"));
        out.embedding.phi_mut().copy_from_slice(seg("phi"));
        match &mut out.offsets {
            OffsetModel::Estimator(est) => est.set_from_slice(seg("estimator"))?,
            OffsetModel::Direct(fields) => {
                for (i, f) in fields.iter_mut().enumerate() {
                    f.data_mut().copy_from_slice(seg(&format!("offsets{i}")));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
    /// Propagation rounds per forward pass.
    pub iters: usize,
    pub weights: LossWeights,
    pub train_embedding: bool,
    pub train_offsets: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            steps: 200,
            iters: 3,
            weights: LossWeights::default(),
            train_embedding: true,
            train_offsets: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: FitParams,
    /// Loss before each update, followed by the loss of the final parameters.
    pub loss_trace: Vec<f64>,
}

struct SceneGrad {
    loss: f64,
    theta: Vec<f64>,
    phi: Vec<f64>,
    offsets: Vec<f64>,
}

fn scene_loss_and_grad(
    scene: &FitScene,
    index: usize,
    params: &FitParams,
    iters: usize,
) -> Result<SceneGrad> {
    let (offsets, acts) = match &params.offsets {
        OffsetModel::Estimator(est) => {
            let (o, a) = est.forward_cached(&scene.features)?;
            (o, Some(a))
        }
        OffsetModel::Direct(fields) => (
            fields.get(index).cloned().ok_or_else(|| {
                Error::ShapeMismatch(format!("no offset field for scene {index}"))
            })?,
            None,
        ),
    };
    let mut tape = DspnTape::new(&scene.features, &offsets, &params.embedding)?;
    let refined = tape.refine(
        &scene.coarse,
        &scene.sparse,
        &scene.mask,
        &scene.confidence,
        iters,
    )?;

    let gt = scene.ground_truth.data();
    let valid = gt.iter().filter(|&&g| g > 0.0).count();
    if valid == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let nf = valid as f64;
    let mut loss = 0.0;
    let upstream: Vec<f64> = refined
        .data()
        .iter()
        .zip(gt)
        .map(|(&r, &g)| {
            if g > 0.0 {
                loss += (r - g) * (r - g);
                2.0 * (r - g) / nf
            } else {
                0.0
            }
        })
        .collect();
    let upstream = Grid::from_vec(refined.width(), refined.height(), 1, upstream)?;
    let grads = tape.backward(&upstream)?;
    let offsets_grad = match (&params.offsets, acts) {
        (OffsetModel::Estimator(est), Some(acts)) => est
            .backward(&scene.features, &acts, &grads.d_offsets)?
            .to_vec(),
        _ => grads.d_offsets.data().to_vec(),
    };
    Ok(SceneGrad {
        loss: loss / nf,
        theta: grads.d_theta,
        phi: grads.d_phi,
        offsets: offsets_grad,
    })
}

/// Refined-depth loss `alpha * mean_s L2(D_r, D*)` and its gradient, laid out
/// like [`FitParams::flatten`]. Frozen groups get zero gradient.
pub fn fit_loss_and_grad(
    scenes: &[FitScene],
    params: &FitParams,
    cfg: &FitConfig,
) -> Result<(f64, ParamVector)> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty scene set".into()));
    }
    let per_scene: Vec<Result<SceneGrad>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| scene_loss_and_grad(s, i, params, cfg.iters))
        .collect();
    let scale = cfg.weights.alpha / scenes.len() as f64;
    let mut grad = params.flatten().zeros_like();
    let mut loss = 0.0;
    let n_emb = params.embedding.theta().len();
    let direct = matches!(params.offsets, OffsetModel::Direct(_));
    let mut offsets_at = 2 * n_emb;
    for sg in per_scene {
        let sg = sg?;
        loss += sg.loss;
        if cfg.train_embedding {
            for (g, v) in grad.values[..n_emb].iter_mut().zip(&sg.theta) {
                *g += scale * v;
            }
            for (g, v) in grad.values[n_emb..2 * n_emb].iter_mut().zip(&sg.phi) {
                *g += scale * v;
            }
        }
        if cfg.train_offsets {
            let dst = &mut grad.values[offsets_at..offsets_at + sg.offsets.len()];
            for (g, v) in dst.iter_mut().zip(&sg.offsets) {
                *g += scale * v;
            }
        }
        if direct {
            offsets_at += sg.offsets.len();
        }
    }
    Ok((cfg.weights.alpha * loss / scenes.len() as f64, grad))
}

/// Loss and gradient after `step` updates. Overflowing parameters surface as
/// non-finite logits, which count as divergence once training has started.
fn evaluate(
    scenes: &[FitScene],
    params: &FitParams,
    cfg: &FitConfig,
    step: usize,
) -> Result<(f64, ParamVector)> {
    match fit_loss_and_grad(scenes, params, cfg) {
        Err(Error::InvalidFeature(_) | Error::NonFiniteLoss) if step > 0 => {
            Err(Error::Diverged { step })
        }
        other => other,
    }
}

/// Plain full-batch gradient descent on the refined-depth loss.
///
/// Deterministic: scenes are processed in parallel but gradients are summed
/// in scene order.
pub fn toy_fit(scenes: &[FitScene], init: &FitParams, cfg: &FitConfig) -> Result<FitResult> {
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig(
            "toy_fit needs at least one step".into(),
        ));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be >= 0, got {}",
            cfg.lr
        )));
    }
    cfg.weights.validate()?;
    let mut params = init.clone();
    let mut flat = params.flatten();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grad) = evaluate(scenes, &params, cfg, step)?;
        if !loss.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        trace.push(loss);
        for (p, g) in flat.values.iter_mut().zip(&grad.values) {
            *p -= cfg.lr * g;
        }
        params = params.unflatten(&flat)?;
    }
    let (loss, _) = evaluate(scenes, &params, cfg, cfg.steps)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    trace.push(loss);
    Ok(FitResult {
        params,
        loss_trace: trace,
    })
}
