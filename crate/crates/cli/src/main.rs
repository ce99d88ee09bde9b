//! `ftlab`: pretrain, fine-tune and compare strategies from the command line.

mod args;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use args::{DataArgs, EncoderArgs, StrategyArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "ftlab", version, about = "Fine-tuning strategy lab", args_override_self = true)]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat key=value file of flag defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ftlab-out")]
    out: PathBuf,
    /// Worker threads for grid and variance runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-token pretraining of a fresh encoder.
    Pretrain(PretrainCmd),
    /// Fine-tune a pretrained checkpoint once.
    Finetune(FinetuneCmd),
    /// Sweep learning rate, mixout and re-init grids.
    Grid(GridCmd),
    /// Mean and std of test metrics across seeds.
    Variance(VarianceCmd),
    /// Render a results CSV as a table.
    Report(ReportCmd),
}

const SUBCOMMANDS: [&str; 5] = ["pretrain", "finetune", "grid", "variance", "report"];

#[derive(clap::Args, Debug)]
pub struct PretrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, default_value_t = 0.15)]
    pub mask_frac: f64,
}

#[derive(clap::Args, Debug)]
pub struct FinetuneCmd {
    #[arg(long)]
    pub pretrained: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(clap::Args, Debug)]
pub struct GridCmd {
    #[command(flatten)]
    pub base: FinetuneCmd,
    /// Axes to sweep, comma-separated: lr, mixout, reinit.
    #[arg(long, value_delimiter = ',', default_value = "lr")]
    pub axes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1e-5,3e-5,5e-5")]
    pub lr_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    pub mixout_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub reinit_grid: Vec<usize>,
}

#[derive(clap::Args, Debug)]
pub struct VarianceCmd {
    #[command(flatten)]
    pub base: FinetuneCmd,
    /// Comma-separated seeds, at least two.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Strategy overrides such as `llrd=4group,mixout=0.7,reinit=1`;
    /// repeat for several rows. `baseline` uses the base flags as given.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
}

#[derive(clap::Args, Debug)]
pub struct ReportCmd {
    /// Results CSV written by finetune, grid or variance.
    #[arg(long)]
    pub input: PathBuf,
}

pub struct Common {
    pub seed: u64,
    pub out: PathBuf,
}

fn run() -> ftlab_core::Result<()> {
    let argv = config::expand(std::env::args_os().collect(), &SUBCOMMANDS)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ftlab_core::Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ftlab_core::Error::Config(format!("thread pool: {e}")))?;
    }
    let common = Common {
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Pretrain(c) => commands::pretrain(&common, &c),
        Command::Finetune(c) => commands::finetune(&common, &c),
        Command::Grid(c) => commands::grid(&common, &c),
        Command::Variance(c) => commands::variance(&common, &c),
        Command::Report(c) => commands::report(&c),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
