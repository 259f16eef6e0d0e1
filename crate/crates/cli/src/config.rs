//! Run configuration: one JSON document, with `--set key=value` overrides
//! addressing keys by dotted path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dspn_core::gradcheck::GradcheckConfig;
use dspn_core::pipeline::{AblationConfig, RefineMethod, SuiteConfig, TrainConfig};
use dspn_core::KernelSize;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Generate,
    Complete,
    Eval,
    Gradcheck,
    Ablate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Sparse depth (`.grd` or `.pgm`) to complete instead of a synthetic suite.
    pub sparse: Option<PathBuf>,
    /// Dense ground truth (`.grd` or `.pgm`) for error maps and `eval`.
    pub ground_truth: Option<PathBuf>,
    /// Prediction to score against `ground_truth` in `eval`.
    pub prediction: Option<PathBuf>,
    /// Depth scale of 16-bit PGM inputs (raw / scale = meters).
    pub pgm_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: usize,
    pub seed: u64,
    pub size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        Self {
            instances: 20,
            seed: 0,
            size: d.size,
            feature_dim: d.feature_dim,
            embed_dim: d.embed_dim,
            eps: d.eps,
            tolerance: d.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub methods: Vec<RefineMethod>,
    pub iters: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        let d = AblationConfig::default();
        Self {
            methods: d.methods,
            iters: d.iters,
            kernels: d.kernels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overridden by the subcommand.
    pub mode: Option<Mode>,
    pub refine: RefineMethod,
    pub k: usize,
    pub iters: usize,
    /// Raw value of the uniform CSPN stencils.
    pub cspn_affinity: f64,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckSection,
    pub ablate: AblateSection,
    pub input: Inputs,
    /// Directory for GRD artifacts.
    pub output_dir: PathBuf,
    /// CSV destination for `eval` and `ablate`; stdout when unset.
    pub csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            refine: RefineMethod::Dspn,
            k: 3,
            iters: 3,
            cspn_affinity: 1.0,
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckSection::default(),
            ablate: AblateSection::default(),
            input: Inputs {
                pgm_scale: dspn_core::io::DEFAULT_DEPTH_SCALE,
                ..Inputs::default()
            },
            output_dir: PathBuf::from("out"),
            csv: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        // Start from the full default document so overrides can address any key.
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, std::mem::take(&mut doc));
        for item in overrides {
            apply_override(&mut merged, item)?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kernel(&self) -> anyhow::Result<KernelSize> {
        Ok(KernelSize::new(self.k)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.kernel()?;
        self.suite.validate()?;
        self.train.weights.validate()?;
        if !(self.cspn_affinity.is_finite()) {
            bail!("cspn_affinity must be finite");
        }
        if !(self.input.pgm_scale > 0.0 && self.input.pgm_scale.is_finite()) {
            bail!("input.pgm_scale must be > 0");
        }
        for &k in &self.ablate.kernels {
            KernelSize::new(k)?;
        }
        let g = &self.gradcheck;
        if g.instances == 0 || g.size < 2 || g.feature_dim == 0 || g.embed_dim == 0 {
            bail!("gradcheck needs instances >= 1, size >= 2 and nonzero dimensions");
        }
        if !(g.eps > 0.0 && g.tolerance > 0.0) {
            bail!("gradcheck eps and tolerance must be > 0");
        }
        Ok(())
    }

    pub fn gradcheck_config(&self) -> GradcheckConfig {
        let g = &self.gradcheck;
        GradcheckConfig {
            size: g.size,
            feature_dim: g.feature_dim,
            embed_dim: g.embed_dim,
            kernel: KernelSize::THREE,
            eps: g.eps,
            tolerance: g.tolerance,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            methods: self.ablate.methods.clone(),
            iters: self.ablate.iters.clone(),
            kernels: self.ablate.kernels.clone(),
            cspn_affinity: self.cspn_affinity,
            train: self.train,
        }
    }
}

/// Recursively overlays `src` onto `dst`; objects merge, everything else
/// replaces.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(doc: &mut Value, item: &str) -> anyhow::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .with_context(|| format!("override {item:?} is not key=value"))?;
    if key.is_empty() {
        bail!("override {item:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        let obj = slot
            .as_object_mut()
            .with_context(|| format!("override {key:?}: {part:?} is not inside an object"))?;
        slot = obj.entry(part).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}
