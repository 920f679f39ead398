use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgvi_cli::{load_config, Overrides, Setting, SplitChoice};

#[derive(Parser)]
#[command(
    name = "sgvi",
    about = "Scene-graph variational inference experiments: generation, training, inference, evaluation and ablations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run directory for all outputs
    #[arg(long)]
    out: PathBuf,
    /// Master seed, overriding the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for instance-level parallelism
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluation setting preset
    #[arg(long, value_enum)]
    setting: Option<Setting>,
    /// Mirror-descent iteration cap override
    #[arg(long)]
    emd_iters: Option<usize>,
    /// Mirror-descent early-stop tolerance override
    #[arg(long)]
    emd_eps: Option<f64>,
    /// Mirror-descent initial learning rate override
    #[arg(long)]
    emd_lr: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            setting: self.setting,
            emd_iters: self.emd_iters,
            emd_eps: self.emd_eps,
            emd_lr: self.emd_lr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted labels
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the feature model on a generated dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by `generate`
        #[arg(long)]
        data: PathBuf,
    },
    /// Run per-node inference and write posterior reports
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint or model JSON
        #[arg(long)]
        model: PathBuf,
        /// Which manifest split to read
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitChoice,
    },
    /// Evaluate recall metrics on the eval split
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Sweep the mirror-descent iteration cap and tabulate mean recall
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Iteration caps to sweep
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
        iters: Vec<usize>,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { common } => {
            let config = load_config(&common.config, &common.overrides())?;
            sgvi_cli::run_generate(&config, &common.out)
        }
        Command::Train { common, data } => {
            let config = load_config(&common.config, &common.overrides())?;
            sgvi_cli::run_train(&config, data, &common.out)
        }
        Command::Infer { common, data, model, split } => {
            let config = load_config(&common.config, &common.overrides())?;
            sgvi_cli::run_infer(&config, data, model, *split, &common.out)
        }
        Command::Evaluate { common, data, model } => {
            let config = load_config(&common.config, &common.overrides())?;
            sgvi_cli::run_evaluate(&config, data, model, &common.out).map(|_| ())
        }
        Command::Ablate { common, data, model, iters } => {
            let config = load_config(&common.config, &common.overrides())?;
            sgvi_cli::run_ablate(&config, data, model, iters, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
