use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cod_mining::experiment::{cmd_report, cmd_run, cmd_upper_bound, Overrides};
use cod_mining::importance::Criterion;
use cod_mining::trainer::Strategy;

#[derive(Parser)]
#[command(name = "codmine", about = "Continual object detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a strategy for every seed and write a manifest.
    Run(RunArgs),
    /// Build comparison tables and plots from manifests.
    Report {
        manifests: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
    /// Train the joint upper bound.
    UpperBound(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    percentage: Option<f64>,
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    /// Comma-separated list, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            strategy: self.strategy,
            criterion: self.criterion,
            percentage: self.percentage,
            penalty: self.penalty,
            sample_fraction: self.sample_fraction,
            replay_capacity: self.replay_capacity,
            seeds: self.seeds.clone(),
            out_dir: self.out_dir.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(&a.config, &a.overrides()).map(|m| {
            println!("{}", m.summary_csv.display());
        }),
        Command::UpperBound(a) => cmd_upper_bound(&a.config, &a.overrides()).map(|m| {
            println!("{}", m.summary_csv.display());
        }),
        Command::Report { manifests, out_dir } => cmd_report(manifests, out_dir).map(|r| {
            if let Ok(text) = std::fs::read_to_string(&r.table) {
                print!("{text}");
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
