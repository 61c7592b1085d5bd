//! `exptilt`: estimate, optimize, and stress-test exponential-tilt effects
//! from a JSON run configuration.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Command, RunConfig};

#[derive(Parser)]
#[command(name = "exptilt", version, about = "Effects of exponentially tilted multivariate exposures")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data CSV; overrides `data.path`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "exptilt-out")]
    out: PathBuf,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// θ̂(δ) with confidence intervals along a set of tilts.
    Estimate,
    /// Multistart Riemannian BFGS for the optimal tilt at each Gelbrich target.
    Optimize,
    /// Omitted-variable bounds, benchmarks and robustness contours.
    Sensitivity,
    /// Simulation benchmark over the six designs.
    Simulate,
}

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cmd = match cli.command {
        Sub::Estimate => Command::Estimate,
        Sub::Optimize => Command::Optimize,
        Sub::Sensitivity => Command::Sensitivity,
        Sub::Simulate => Command::Simulate,
    };

    let cfg = match load(&cli, cmd) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("config error: --threads: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    }

    let result = match cmd {
        Command::Estimate => run::estimate(&cfg, &cli.out),
        Command::Optimize => run::optimize(&cfg, &cli.out),
        Command::Sensitivity => run::sensitivity(&cfg, &cli.out),
        Command::Simulate => run::simulate(&cfg, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}

fn load(cli: &Cli, cmd: Command) -> Result<RunConfig, config::ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("{}")?,
    };
    if let Some(p) = &cli.data {
        match cfg.data.as_mut() {
            Some(d) => d.path = p.clone(),
            None => return Err(config::ConfigError("--data: the config must name the data columns".into())),
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cmd == Command::Simulate && cfg.simulate.is_none() {
        cfg.simulate = Some(Default::default());
    }
    cfg.validate(cmd)?;
    Ok(cfg)
}
