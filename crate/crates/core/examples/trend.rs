//! Desk-scale trend run: partition, FedAvg and all five personalization
//! algorithms on a synthetic dataset, then the summary table.
//!
//! Usage: `cargo run --release --example trend -- CONFIG.toml [SEED...]`

use std::path::PathBuf;

use fedmoe::cli::{self, metrics, ExperimentConfig};
use fedmoe::personalization::Algorithm;

fn main() -> fedmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(args.next().expect("config path"));
    let seeds: Vec<u64> = args.map(|s| s.parse().expect("seed")).collect();
    let base = ExperimentConfig::load(&config)?;
    for seed in if seeds.is_empty() { vec![base.seed] } else { seeds } {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out_dir = base.out_dir.join(format!("seed_{seed}"));
        let t = std::time::Instant::now();
        cli::cmd_partition(&cfg)?;
        let fed = cli::cmd_fedavg(&cfg)?;
        let mut files = vec![fed.clients_path];
        for a in Algorithm::ALL {
            files.push(cli::cmd_personalize(&cfg, a, None)?.csv_path);
        }
        let report = cli::cmd_report(&files, &cfg.out_dir)?;
        println!("seed {seed} ({:.1}s)", t.elapsed().as_secs_f64());
        metrics::render_summary(&report.summary, &mut std::io::stdout()).expect("stdout");
    }
    Ok(())
}
