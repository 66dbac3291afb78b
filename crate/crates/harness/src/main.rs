use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use vssam_harness::compare::{compare_table, read_summaries};
use vssam_harness::runner::{partition_stats, run_experiment_with_threads};
use vssam_harness::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "vssam", version, about = "Federated FedAvg / FedSAM / FedVSSAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Write outputs here instead of `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Evaluate every N rounds instead of `metrics.cadence`.
    #[arg(long, global = true)]
    cadence: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured algorithm and seed.
    Run { config: PathBuf },
    /// Combine `summary.csv` files into one comparison table.
    Compare {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Print CSV instead of aligned text.
        #[arg(long)]
        csv: bool,
    },
    /// Print per-device label histograms.
    PartitionStats { config: PathBuf },
}

impl Cli {
    fn load(&self, path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
        let mut config = load_config(path)?;
        if let Some(seed) = self.seed_override {
            config.seeds = vec![seed];
        }
        if let Some(dir) = &self.out_dir {
            config.output.dir = dir.clone();
        }
        if let Some(c) = self.cadence {
            config.metrics.cadence = c;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if cli.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    match &cli.command {
        Command::Run { config } => {
            let config = cli.load(config)?;
            let report = run_experiment_with_threads(&config, cli.threads)?;
            print!("{}", report.table.to_text());
            println!("outputs in {}", report.out_dir.display());
            let failed = report.failures();
            if failed > 0 {
                for s in report.summaries.iter().filter_map(|s| s.error.as_ref()) {
                    eprintln!("failed: {s}");
                }
                eprintln!("{failed} run(s) failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compare { summaries, csv } => {
            let mut all = Vec::new();
            for path in summaries {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                all.extend(read_summaries(file).with_context(|| format!("reading {}", path.display()))?);
            }
            let table = compare_table(&all);
            if *csv {
                print!("{}", table.to_csv()?);
            } else {
                print!("{}", table.to_text());
            }
        }
        Command::PartitionStats { config } => {
            let config = cli.load(config)?;
            for &seed in &config.seeds {
                print!("{}", partition_stats(&config, seed)?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
