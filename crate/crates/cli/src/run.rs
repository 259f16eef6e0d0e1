use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dspn_core::gradcheck::run_gradcheck;
use dspn_core::io::{mask_from_depth, read_grd, read_pgm16, write_grd};
use dspn_core::metrics::eval_metrics;
use dspn_core::pipeline::{
    ablate, ablation_csv, eval_csv, format_sig6, prepare_suite, train_dspn, DspnModel,
    RefineMethod, Refiner, Scene,
};
use dspn_core::Grid;

use crate::config::{Mode, RunConfig};

/// Outcome of a run that completed without errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Gradient check exceeded its tolerance.
    CheckFailed,
}

pub fn run(mode: Mode, cfg: &RunConfig) -> anyhow::Result<Status> {
    match mode {
        Mode::Generate => generate(cfg),
        Mode::Complete => complete(cfg),
        Mode::Eval => eval(cfg),
        Mode::Gradcheck => gradcheck(cfg),
        Mode::Ablate => {
            let scenes = prepare_suite(&cfg.suite)?;
            let rows = ablate(&scenes, &cfg.ablation_config())?;
            emit_csv(cfg, &ablation_csv(&rows))?;
            Ok(Status::Ok)
        }
    }
}

fn emit_csv(cfg: &RunConfig, text: &str) -> anyhow::Result<()> {
    match &cfg.csv {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_artifact(dir: &Path, name: &str, grid: &Grid) -> anyhow::Result<()> {
    let path = dir.join(name);
    write_grd(grid, &path).with_context(|| format!("writing {}", path.display()))
}

fn read_depth(path: &Path, pgm_scale: f64) -> anyhow::Result<Grid> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let grid = if is_pgm {
        read_pgm16(path, pgm_scale)
    } else {
        read_grd(path)
    };
    grid.with_context(|| format!("reading {}", path.display()))
}

fn generate(cfg: &RunConfig) -> anyhow::Result<Status> {
    let scenes = prepare_suite(&cfg.suite)?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    for s in &scenes {
        write_artifact(
            &cfg.output_dir,
            &format!("scene_{:03}_gt.grd", s.id),
            &s.ground_truth,
        )?;
        write_artifact(
            &cfg.output_dir,
            &format!("scene_{:03}_sparse.grd", s.id),
            &s.sparse,
        )?;
        write_artifact(
            &cfg.output_dir,
            &format!("scene_{:03}_coarse.grd", s.id),
            &s.coarse,
        )?;
    }
    eprintln!(
        "wrote {} scenes to {}",
        scenes.len(),
        cfg.output_dir.display()
    );
    Ok(Status::Ok)
}

/// DSPN parameters for `cfg`, trained on the synthetic suite unless
/// `train.steps` is 0.
fn dspn_model(cfg: &RunConfig, suite: Option<&[Scene]>) -> anyhow::Result<DspnModel> {
    let kernel = cfg.kernel()?;
    if cfg.train.steps == 0 {
        return Ok(DspnModel::init(cfg.suite.feature_dim, kernel, &cfg.train));
    }
    let owned;
    let scenes = match suite {
        Some(s) => s,
        None => {
            owned = prepare_suite(&cfg.suite)?;
            &owned
        }
    };
    let trained = train_dspn(scenes, kernel, cfg.iters, &cfg.train)?;
    if let (Some(first), Some(last)) = (trained.loss_trace.first(), trained.loss_trace.last()) {
        eprintln!(
            "trained dspn: loss {} -> {}",
            format_sig6(*first),
            format_sig6(*last)
        );
    }
    Ok(trained.model)
}

fn refined(cfg: &RunConfig, scene: &Scene, model: Option<&DspnModel>) -> anyhow::Result<Grid> {
    let refiner = match (cfg.refine, model) {
        (RefineMethod::None, _) => Refiner::None,
        (RefineMethod::Cspn, _) => Refiner::Cspn {
            kernel: cfg.kernel()?,
            iters: cfg.iters,
            affinity: cfg.cspn_affinity,
        },
        (RefineMethod::Dspn, Some(model)) => Refiner::Dspn {
            model,
            iters: cfg.iters,
        },
        (RefineMethod::Dspn, None) => bail!("dspn refinement requested without a model"),
    };
    Ok(refiner.refine(scene)?)
}

/// `|pred - gt|` where the ground truth is valid, 0 elsewhere.
fn error_map(pred: &Grid, gt: &Grid) -> anyhow::Result<Grid> {
    Ok(pred.zip_map(gt, |p, g| if g > 0.0 { (p - g).abs() } else { 0.0 })?)
}

fn complete(cfg: &RunConfig) -> anyhow::Result<Status> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    if let Some(sparse_path) = &cfg.input.sparse {
        let ds = read_depth(sparse_path, cfg.input.pgm_scale)?;
        let gt = match &cfg.input.ground_truth {
            Some(p) => Some(read_depth(p, cfg.input.pgm_scale)?),
            None => None,
        };
        let m = mask_from_depth(&ds);
        let placeholder = Grid::zeros(ds.width(), ds.height(), 1);
        let scene = Scene::from_parts(0, gt.clone().unwrap_or(placeholder), ds, m, &cfg.suite)?;
        let model = match cfg.refine {
            RefineMethod::Dspn => Some(dspn_model(cfg, None)?),
            _ => None,
        };
        let out = refined(cfg, &scene, model.as_ref())?;
        write_artifact(&cfg.output_dir, "refined.grd", &out)?;
        match gt {
            Some(gt) => write_artifact(&cfg.output_dir, "error.grd", &error_map(&out, &gt)?)?,
            None => eprintln!("no ground truth given; skipping error map"),
        }
        return Ok(Status::Ok);
    }
    let scenes = prepare_suite(&cfg.suite)?;
    let model = match cfg.refine {
        RefineMethod::Dspn => Some(dspn_model(cfg, Some(&scenes))?),
        _ => None,
    };
    for s in &scenes {
        let out = refined(cfg, s, model.as_ref())?;
        write_artifact(
            &cfg.output_dir,
            &format!("scene_{:03}_refined.grd", s.id),
            &out,
        )?;
        write_artifact(
            &cfg.output_dir,
            &format!("scene_{:03}_error.grd", s.id),
            &error_map(&out, &s.ground_truth)?,
        )?;
    }
    eprintln!(
        "wrote {} refined scenes to {}",
        scenes.len(),
        cfg.output_dir.display()
    );
    Ok(Status::Ok)
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "0".into())
}

fn eval(cfg: &RunConfig) -> anyhow::Result<Status> {
    let rows = if let Some(pred_path) = &cfg.input.prediction {
        let gt_path: &PathBuf = cfg
            .input
            .ground_truth
            .as_ref()
            .context("eval of a prediction file needs input.ground_truth")?;
        let pred = read_depth(pred_path, cfg.input.pgm_scale)?;
        let gt = read_depth(gt_path, cfg.input.pgm_scale)?;
        vec![(file_id(pred_path), eval_metrics(&pred, &gt)?)]
    } else {
        let scenes = prepare_suite(&cfg.suite)?;
        let model = match cfg.refine {
            RefineMethod::Dspn => Some(dspn_model(cfg, Some(&scenes))?),
            _ => None,
        };
        let mut rows = Vec::with_capacity(scenes.len());
        for s in &scenes {
            let out = refined(cfg, s, model.as_ref())?;
            rows.push((s.id.to_string(), eval_metrics(&out, &s.ground_truth)?));
        }
        rows
    };
    emit_csv(cfg, &eval_csv(&rows)?)?;
    Ok(Status::Ok)
}

fn gradcheck(cfg: &RunConfig) -> anyhow::Result<Status> {
    let g = &cfg.gradcheck;
    let worst = run_gradcheck(&cfg.gradcheck_config(), g.seed, g.instances)?;
    let mut text = String::from("group,max_rel_err,max_abs_err\n");
    let mut max_rel = 0.0f64;
    for (group, rel, abs) in &worst {
        text.push_str(&format!(
            "{},{},{}\n",
            group.name(),
            format_sig6(*rel),
            format_sig6(*abs)
        ));
        max_rel = max_rel.max(*rel);
    }
    emit_csv(cfg, &text)?;
    if max_rel <= g.tolerance {
        Ok(Status::Ok)
    } else {
        eprintln!(
            "gradient check failed: max relative error {} > {}",
            format_sig6(max_rel),
            format_sig6(g.tolerance)
        );
        Ok(Status::CheckFailed)
    }
}
