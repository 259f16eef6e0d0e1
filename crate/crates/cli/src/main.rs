//! `dspn`: generate synthetic scenes, complete and evaluate depth maps, check
//! gradients and run the refinement ablation.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Mode, RunConfig};
use run::Status;

#[derive(Debug, Parser)]
#[command(name = "dspn", version, about = "Spatial propagation depth refinement")]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    /// JSON configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set suite.scenes=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Honors `DSPN_THREADS` as a cap on worker threads.
fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DSPN_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                anyhow::anyhow!("DSPN_THREADS must be a positive integer, got {v:?}")
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads()
        .and_then(|()| RunConfig::load(cli.config.as_deref(), &cli.overrides))
        .and_then(|cfg| run::run(cli.mode, &cfg));
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
