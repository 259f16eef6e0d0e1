//! End-to-end runs over synthetic scene suites: scene preparation, refinement
//! with CSPN or DSPN, DSPN training, evaluation and the ablation sweep.
//!
//! Scene `i` of a suite uses geometry seed `base + i` and sparse seed
//! `(base + i) ^ SPARSE_SEED_SALT`, where `base` is the suite's scene seed.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{heuristic_confidence, ConfidenceConfig};
use crate::cspn::{cspn_refine, AffinityStencilField};
use crate::dspn::{dspn_refine, EmbeddingParams, FeatureGrid, OffsetEstimatorParams};
use crate::error::{Error, Result};
use crate::gradcheck::{toy_fit, FitConfig, FitParams, FitScene, OffsetModel};
use crate::grid::Grid;
use crate::metrics::{eval_metrics, LossWeights, MetricReport};
use crate::neighborhood::KernelSize;
use crate::synth::{
    build_features, coarse_predict, gen_scene, sample_sparse, SceneSpec, SparseSpec,
    SPARSE_SEED_SALT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Template for every scene; `seed` is the suite's base seed.
    pub scene: SceneSpec,
    /// The `seed` field is ignored; see the module docs.
    pub sparse: SparseSpec,
    pub scenes: usize,
    pub feature_dim: usize,
    pub confidence: ConfidenceConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            sparse: SparseSpec::default(),
            scenes: 50,
            feature_dim: 16,
            confidence: ConfidenceConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sparse.validate()?;
        self.confidence.validate()?;
        if self.scenes == 0 {
            return Err(Error::InvalidConfig(
                "suite needs at least one scene".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "feature dimension must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Geometry and sparse-sampling seeds of scene `index`.
    pub fn seeds(&self, index: usize) -> (u64, u64) {
        let s = self.scene.seed.wrapping_add(index as u64);
        (s, s ^ SPARSE_SEED_SALT)
    }
}

/// Everything the refiners and the evaluator need for one scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: usize,
    pub ground_truth: Grid,
    pub sparse: Grid,
    pub mask: Grid,
    pub coarse: Grid,
    pub features: FeatureGrid,
    /// Heuristic confidence of the sparse samples.
    pub confidence: Grid,
}

impl Scene {
    /// Builds the derived inputs (coarse depth, features, confidence) from a
    /// ground truth and its sparse samples.
    pub fn from_parts(
        id: usize,
        ground_truth: Grid,
        sparse: Grid,
        mask: Grid,
        cfg: &SuiteConfig,
    ) -> Result<Scene> {
        let coarse = coarse_predict(&sparse, &mask)?;
        let features = build_features(&coarse, &mask, cfg.feature_dim)?;
        let confidence = heuristic_confidence(&sparse, &mask, &cfg.confidence)?;
        Ok(Scene {
            id,
            ground_truth,
            sparse,
            mask,
            coarse,
            features,
            confidence,
        })
    }

    fn fit_scene(&self) -> FitScene {
        FitScene {
            coarse: self.coarse.clone(),
            sparse: self.sparse.clone(),
            mask: self.mask.clone(),
            confidence: self.confidence.clone(),
            features: self.features.clone(),
            ground_truth: self.ground_truth.clone(),
        }
    }
}

pub fn prepare_scene(cfg: &SuiteConfig, index: usize) -> Result<Scene> {
    let (geo, sparse_seed) = cfg.seeds(index);
    let gt = gen_scene(&SceneSpec {
        seed: geo,
        ..cfg.scene
    })?;
    let (ds, m) = sample_sparse(
        &gt,
        &SparseSpec {
            seed: sparse_seed,
            ..cfg.sparse
        },
    )?;
    Scene::from_parts(index, gt, ds, m, cfg)
}

pub fn prepare_suite(cfg: &SuiteConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.scenes)
        .into_par_iter()
        .map(|i| prepare_scene(cfg, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMethod {
    None,
    Cspn,
    Dspn,
}

impl RefineMethod {
    pub fn name(self) -> &'static str {
        match self {
            RefineMethod::None => "none",
            RefineMethod::Cspn => "cspn",
            RefineMethod::Dspn => "dspn",
        }
    }
}

/// Learned DSPN parameters: the similarity embedding and the offset
/// estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct DspnModel {
    pub embedding: EmbeddingParams,
    pub estimator: OffsetEstimatorParams,
}

impl DspnModel {
    pub fn init(feature_dim: usize, kernel: KernelSize, cfg: &TrainConfig) -> DspnModel {
        DspnModel {
            embedding: EmbeddingParams::random(cfg.embed_dim, feature_dim, cfg.init_std, cfg.seed),
            estimator: OffsetEstimatorParams::new(
                feature_dim,
                cfg.hidden,
                kernel,
                cfg.seed.wrapping_add(1),
            ),
        }
    }

    pub fn kernel(&self) -> KernelSize {
        self.estimator.kernel()
    }

    pub fn refine(&self, scene: &Scene, iters: usize) -> Result<Grid> {
        let offsets = self.estimator.forward(&scene.features)?;
        dspn_refine(
            &scene.coarse,
            &scene.sparse,
            &scene.mask,
            &scene.confidence,
            &scene.features,
            &offsets,
            &self.embedding,
            iters,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    /// Hidden channels of the offset estimator.
    pub hidden: usize,
    /// Standard deviation of the initial embedding weights.
    pub init_std: f64,
    pub lr: f64,
    pub steps: usize,
    /// Train on the first `train_scenes` scenes of the suite (0 = all).
    pub train_scenes: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 8,
            init_std: 0.1,
            lr: 1.0,
            steps: 40,
            train_scenes: 0,
            seed: 7,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: DspnModel,
    pub loss_trace: Vec<f64>,
}

/// Fits offsets and embeddings by gradient descent on the refined-depth loss.
pub fn train_dspn(
    scenes: &[Scene],
    kernel: KernelSize,
    iters: usize,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidConfig("no training scenes".into()))?;
    let n = match cfg.train_scenes {
        0 => scenes.len(),
        n => n.min(scenes.len()),
    };
    let fit_scenes: Vec<FitScene> = scenes[..n].iter().map(Scene::fit_scene).collect();
    let init = DspnModel::init(first.features.dim(), kernel, cfg);
    let params = FitParams {
        embedding: init.embedding,
        offsets: OffsetModel::Estimator(init.estimator),
    };
    let fit_cfg = FitConfig {
        lr: cfg.lr,
        steps: cfg.steps,
        iters,
        weights: cfg.weights,
        train_embedding: true,
        train_offsets: true,
    };
    let result = toy_fit(&fit_scenes, &params, &fit_cfg)?;
    let OffsetModel::Estimator(estimator) = result.params.offsets else {
        unreachable!("estimator model in, estimator model out")
    };
    Ok(TrainedModel {
        model: DspnModel {
            embedding: result.params.embedding,
            estimator,
        },
        loss_trace: result.loss_trace,
    })
}

/// One refinement setting.
#[derive(Debug, Clone)]
pub enum Refiner<'a> {
    /// The coarse depth as is.
    None,
    /// Uniform stencils of the given raw value, hard replacement.
    Cspn {
        kernel: KernelSize,
        iters: usize,
        affinity: f64,
    },
    /// Confidence-weighted replacement with the heuristic confidence.
    Dspn { model: &'a DspnModel, iters: usize },
}

impl Refiner<'_> {
    pub fn refine(&self, scene: &Scene) -> Result<Grid> {
        match *self {
            Refiner::None => Ok(scene.coarse.clone()),
            Refiner::Cspn {
                kernel,
                iters,
                affinity,
            } => {
                let (w, h) = (scene.coarse.width(), scene.coarse.height());
                let stencils = AffinityStencilField::uniform(w, h, kernel, affinity)?;
                cspn_refine(&scene.coarse, &scene.sparse, &scene.mask, &stencils, iters)
            }
            Refiner::Dspn { model, iters } => model.refine(scene, iters),
        }
    }

    /// Per-scene metrics against the ground truth, in scene order.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<Vec<MetricReport>> {
        scenes
            .par_iter()
            .map(|s| eval_metrics(&self.refine(s)?, &s.ground_truth))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub methods: Vec<RefineMethod>,
    pub iters: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Raw value of the uniform CSPN stencils.
    pub cspn_affinity: f64,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            methods: vec![RefineMethod::None, RefineMethod::Cspn, RefineMethod::Dspn],
            iters: vec![3, 6, 12],
            kernels: vec![3],
            cspn_affinity: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// Mean metrics of one (method, iters, k) cell. The `none` row carries
/// `iters = 0` and `k = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub method: RefineMethod,
    pub iters: usize,
    pub k: usize,
    pub mean: MetricReport,
}

/// Sweeps methods x iters x kernel sizes. DSPN is trained separately for
/// every (iters, k) cell.
pub fn ablate(scenes: &[Scene], cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    let kernels = cfg
        .kernels
        .iter()
        .map(|&k| KernelSize::new(k))
        .collect::<Result<Vec<_>>>()?;
    let mean =
        |reports: Vec<MetricReport>| MetricReport::mean(&reports).ok_or(Error::EmptyGroundTruth);
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        if method == RefineMethod::None {
            rows.push(AblationRow {
                method,
                iters: 0,
                k: 0,
                mean: mean(Refiner::None.evaluate(scenes)?)?,
            });
            continue;
        }
        for &kernel in &kernels {
            for &iters in &cfg.iters {
                let reports = match method {
                    RefineMethod::Cspn => Refiner::Cspn {
                        kernel,
                        iters,
                        affinity: cfg.cspn_affinity,
                    }
                    .evaluate(scenes)?,
                    _ => {
                        let trained = train_dspn(scenes, kernel, iters, &cfg.train)?;
                        Refiner::Dspn {
                            model: &trained.model,
                            iters,
                        }
                        .evaluate(scenes)?
                    }
                };
                rows.push(AblationRow {
                    method,
                    iters,
                    k: kernel.get(),
                    mean: mean(reports)?,
                });
            }
        }
    }
    Ok(rows)
}

/// `v` with 6 significant digits in C `%g` style.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn push_metrics(out: &mut String, r: &MetricReport) {
    let _ = writeln!(
        out,
        "{},{},{},{}",
        format_sig6(r.rmse),
        format_sig6(r.mae),
        format_sig6(r.irmse),
        format_sig6(r.imae)
    );
}

pub const EVAL_CSV_HEADER: &str = "scene_id,rmse,mae,irmse,imae";
pub const ABLATION_CSV_HEADER: &str = "refine,iters,k,rmse,mae,irmse,imae";

/// Per-scene rows followed by a `mean` row.
pub fn eval_csv(rows: &[(String, MetricReport)]) -> Result<String> {
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = MetricReport::mean(&reports).ok_or(Error::EmptyGroundTruth)?;
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for (id, r) in rows {
        out.push_str(id);
        out.push(',');
        push_metrics(&mut out, r);
    }
    out.push_str("mean,");
    push_metrics(&mut out, &mean);
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = write!(out, "{},{},{},", r.method.name(), r.iters, r.k);
        push_metrics(&mut out, &r.mean);
    }
    out
}
