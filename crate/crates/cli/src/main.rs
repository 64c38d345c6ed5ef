mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::BaselineMethod;
use config::{Overrides, RunConfig};

/// Hyperspectral/multispectral fusion with two unmixing autoencoders.
#[derive(Parser)]
#[command(name = "hsfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Spatial resolution ratio of simulated scenes.
    #[arg(long)]
    ratio: Option<usize>,
    /// Number of endmembers.
    #[arg(long)]
    k: Option<usize>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sum-to-one loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sparsity loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Consistency loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Sparsity target.
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let o = Overrides {
            seed: self.seed,
            ratio: self.ratio,
            k: self.k,
            epochs: self.epochs,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            epsilon: self.epsilon,
        };
        let cfg = RunConfig::load(self.config.as_deref())?.resolve(&o)?;
        log::info!("resolved config:\n{}", cfg.to_toml()?);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene and its observations into a directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the x.cube/y.cube pair of a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse a pair with trained weights.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality metrics of an estimate against a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        ratio: f64,
        /// Directory for metrics files and residual maps.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse with a classical method (CNMF uses the directory's operators).
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BaselineMethod::Cnmf)]
        method: BaselineMethod,
        #[command(flatten)]
        common: Common,
    },
    /// Train every module variant over the configured seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { out, common } => commands::simulate(&common.resolve()?, &out),
        Command::Train { data, out, common } => commands::train(&common.resolve()?, &data, &out),
        Command::Fuse { weights, x, y, out } => commands::fuse(&weights, &x, &y, &out),
        Command::Evaluate {
            reference,
            estimate,
            ratio,
            out,
        } => commands::evaluate_cmd(&reference, &estimate, ratio, out.as_deref()),
        Command::Baseline {
            data,
            out,
            method,
            common,
        } => commands::baseline(&common.resolve()?, &data, &out, method),
        Command::Ablate { data, out, common } => commands::ablate(&common.resolve()?, &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{:#}", e).replace('\n', " ");
            eprintln!("error: {}", msg);
            ExitCode::FAILURE
        }
    }
}
