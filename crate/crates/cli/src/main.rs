//! `sclab`: train, evaluate and probe SocialCircle forecasters.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use socialcircle::probe::ManualNeighborSpec;

#[derive(Parser, Debug)]
#[command(
    name = "sclab",
    version,
    about = "SocialCircle trajectory-prediction lab"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of angular partitions.
    #[arg(long, global = true)]
    pub n_partitions: Option<usize>,
    /// Meta factors as a subset of `vdrm`.
    #[arg(long, global = true)]
    pub factors: Option<String>,
    /// Train the plain transformer without the SocialCircle branch.
    #[arg(long, global = true)]
    pub no_socialcircle: bool,
    /// Number of sampled futures.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Any other setting, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint and loss curve.
    Train {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with minADE/minFDE over K samples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every case's sampled futures to `samples.json`.
        #[arg(long)]
        dump_samples: bool,
    },
    /// Predict one case with optional manual neighbors.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long = "case")]
        case_id: String,
        /// Manual neighbor `x0,y0:x1,y1` in scene coordinates. Repeatable.
        #[arg(
            long = "manual",
            value_name = "X0,Y0:X1,Y1",
            allow_hyphen_values = true
        )]
        manual: Vec<ManualNeighborSpec>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write polylines as `label: x0,y0 x1,y1 ...` lines.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Run the HTTP probe service.
    Serve {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write a synthetic trajectory file.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum SynthKind {
    Linear,
    Avoidance,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            ExitCode::from(e.code())
        }
    }
}
