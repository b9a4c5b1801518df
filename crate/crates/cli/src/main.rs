use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use physres::config::{Overrides, RunConfig};
use physres::{commands, exit_code, init_logging, UsageError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "physres", version, about = "Physics-aware reservoir fault diagnosis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fault class left out of training.
    #[arg(long, global = true)]
    held_out: Option<u8>,
    /// Allocate reservoir nodes round-robin instead of by channel rank.
    #[arg(long, global = true)]
    no_shap: bool,
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic recordings and their manifest.
    Synth,
    /// Fit a model and write its artifact.
    Train {
        /// Directory holding a recording manifest.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score every window of a recording CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Shapley ranking of the input channels.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Unseen-fault, readout-ablation and baseline reports.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Accuracy and uncertainty under increasing feature shift.
    ShiftSweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn resolve(base: Option<RunConfig>, common: &Common, data: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        held_out: common.held_out,
        no_shap: common.no_shap,
        mc_samples: common.mc_samples,
        workers: common.workers,
        data_dir: data,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| UsageError(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<()> {
    let files = match cli.command {
        Command::Synth => {
            let cfg = resolve(None, &cli.common, None)?;
            in_pool(cfg.workers, || commands::synth(&cfg))?
        }
        Command::Train { data } => {
            let cfg = resolve(None, &cli.common, data)?;
            in_pool(cfg.workers, || commands::train(&cfg).map(|(_, files)| files))?
        }
        Command::Predict { model, input } => {
            let artifact = commands::load_artifact(&model)?;
            let cfg = resolve(Some(artifact.body.config.clone()), &cli.common, None)?;
            vec![in_pool(cfg.workers, || commands::predict(&cfg, &artifact, &input))?]
        }
        Command::Explain { model, data } => {
            let artifact = commands::load_artifact(&model)?;
            let cfg = resolve(Some(artifact.body.config.clone()), &cli.common, data)?;
            in_pool(cfg.workers, || commands::explain(&cfg, &artifact))?
        }
        Command::Evaluate { data } => {
            let cfg = resolve(None, &cli.common, data)?;
            in_pool(cfg.workers, || commands::evaluate(&cfg))?
        }
        Command::ShiftSweep { data } => {
            let cfg = resolve(None, &cli.common, data)?;
            in_pool(cfg.workers, || commands::shift_sweep_cmd(&cfg))?
        }
    };
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
