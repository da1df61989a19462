use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmoe::cli::{self, metrics, selftest, ExperimentConfig};
use fedmoe::personalization::Algorithm;

#[derive(Parser)]
#[command(name = "fedmoe", version, about = "Federated learning with mixture-of-experts personalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> fedmoe::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split the training set over clients.
    Partition(Common),
    /// Train the global model with federated averaging.
    Fedavg(Common),
    /// Personalize the global model for every client.
    Personalize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Algorithm,
        /// Global checkpoint; defaults to the one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate metrics files into summary and delta tables.
    Report {
        /// Metrics files (CSV or JSONL).
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: fedmoe::Error| e.to_string())
}

fn run(cli: Cli) -> fedmoe::Result<bool> {
    match cli.command {
        Command::Partition(c) => {
            let out = cli::cmd_partition(&c.load()?)?;
            println!("wrote {} and {}", out.partition_path.display(), out.histogram_path.display());
        }
        Command::Fedavg(c) => {
            let out = cli::cmd_fedavg(&c.load()?)?;
            println!(
                "best global accuracy {:.4} at round {}; wrote {}",
                out.best_accuracy,
                out.best_round,
                out.checkpoint_path.display()
            );
        }
        Command::Personalize {
            common,
            algorithm,
            checkpoint,
        } => {
            let out = cli::cmd_personalize(&common.load()?, algorithm, checkpoint.as_deref())?;
            let n = out.records.len().max(1) as f64;
            let local = out.records.iter().map(|r| r.local_acc).sum::<f64>() / n;
            let global = out.records.iter().map(|r| r.global_acc).sum::<f64>() / n;
            println!(
                "{algorithm}: mean local {:.4}, mean global {:.4}; wrote {}",
                local,
                global,
                out.csv_path.display()
            );
        }
        Command::Report { files, out } => {
            let report = cli::cmd_report(&files, &out)?;
            let _ = metrics::render_summary(&report.summary, &mut std::io::stdout());
            println!("wrote {} and {}", report.summary_path.display(), report.deltas_path.display());
        }
        Command::Selftest => return selftest::run(&mut std::io::stdout()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDMOE_LOG", "error")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
