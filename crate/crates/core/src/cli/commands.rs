//! The subcommands, usable both from the binary and as library calls.
//!
//! Everything a command writes lands in the configured output directory:
//!
//! - `partition.json`, `partition_histogram.csv`
//! - `checkpoint.fmck`, `fedavg_rounds.csv`, `fedavg_clients.csv`
//! - `personalize_<alg>.csv`, `personalize_<alg>.jsonl`, `clients/<alg>/client_<id>.fmck`
//! - `summary.csv`, `deltas.csv`
//! - `<command>_manifest.json` next to each of the above

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, encode_personalized, load_global, save_global, write_bytes};
use super::config::ExperimentConfig;
use super::metrics;
use crate::data::{dirichlet_partition, ClientPartition, LabeledDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{class_ratios, global_test, summarize, MetricsRecord, PerClassAccuracy, Summary};
use crate::federation::{init_seed, train_federated, Weighting};
use crate::models::{build_model, ModelParams};
use crate::personalization::{personalize_client, Algorithm};
use crate::seed::derive_seed;

pub const PARTITION_FILE: &str = "partition.json";
pub const HISTOGRAM_FILE: &str = "partition_histogram.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fmck";
pub const ROUNDS_FILE: &str = "fedavg_rounds.csv";
pub const FEDAVG_CLIENTS_FILE: &str = "fedavg_clients.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DELTAS_FILE: &str = "deltas.csv";

const TAG_PERSONALIZE: u64 = 0x7065_7273;

/// Resolved config plus everything needed to trace an artifact back to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub weighting: Weighting,
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    pub seeds: BTreeMap<String, u64>,
    /// File name → SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("experiment".into(), cfg.seed);
        seeds.insert("partition".into(), cfg.partition_spec().seed);
        if let Some((spec, _)) = cfg.synthetic_spec() {
            seeds.insert("dataset".into(), spec.seed);
        }
        seeds.insert("model_init".into(), init_seed(cfg.seed));
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run_id: run_id(cfg),
            config: cfg.clone(),
            weighting: cfg.fedavg.weighting,
            algorithm: None,
            seeds,
            checkpoints: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}_manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Stable identifier of a resolved config: leading hex of its JSON hash.
/// The output directory and worker count are excluded since they do not
/// affect results.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    c.workers = 0;
    let json = serde_json::to_vec(&c).expect("config serializes");
    checkpoint::sha256_hex(&json)[..16].to_string()
}

/// Validates the config and makes sure the output directory is writable.
pub fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub spec: PartitionSpec,
    pub dataset_size: usize,
    pub classes: usize,
    pub clients: Vec<Vec<usize>>,
}

pub struct PartitionOutput {
    pub partition: ClientPartition,
    pub partition_path: PathBuf,
    pub histogram_path: PathBuf,
}

pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<PartitionOutput> {
    prepare(cfg)?;
    let (train, _) = cfg.load_data()?;
    let spec = cfg.partition_spec();
    let partition = dirichlet_partition(&train, &spec)?;
    info!("partitioned {} examples over {} clients", train.len(), partition.len());

    let file = PartitionFile {
        spec,
        dataset_size: train.len(),
        classes: train.classes(),
        clients: partition.clients.clone(),
    };
    let partition_path = cfg.out_dir.join(PARTITION_FILE);
    let text = serde_json::to_string(&file).map_err(|e| Error::Schema(e.to_string()))?;
    std::fs::write(&partition_path, text + "\n").map_err(|e| Error::io(&partition_path, e))?;

    let histogram_path = cfg.out_dir.join(HISTOGRAM_FILE);
    write_histogram(&histogram_path, &partition.histogram(train.labels(), train.classes()))?;
    RunManifest::new("partition", cfg).write(&cfg.out_dir)?;
    Ok(PartitionOutput {
        partition,
        partition_path,
        histogram_path,
    })
}

fn write_histogram(path: &Path, hist: &[Vec<usize>]) -> Result<()> {
    let classes = hist.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    let mut header = vec!["client".to_string(), "samples".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    w.write_record(&header).map_err(|e| Error::Schema(e.to_string()))?;
    for (i, row) in hist.iter().enumerate() {
        let mut rec = vec![i.to_string(), row.iter().sum::<usize>().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the partition written by `partition`, checking it still matches the
/// config and dataset.
pub fn load_partition(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<ClientPartition> {
    let path = cfg.out_dir.join(PARTITION_FILE);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{} not found; run `fedmoe partition` with this config first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: PartitionFile =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.spec != cfg.partition_spec() || file.dataset_size != train.len() {
        return Err(Error::Usage(format!(
            "{} was produced by a different partition config or dataset; rerun `fedmoe partition`",
            path.display()
        )));
    }
    let partition = ClientPartition { clients: file.clients };
    partition.validate(train.len())?;
    Ok(partition)
}

fn client_records(
    run: &str,
    algorithm: &str,
    seed: u64,
    per_class: &PerClassAccuracy,
    train: &LabeledDataset,
    partition: &ClientPartition,
) -> Result<Vec<MetricsRecord>> {
    let global_acc = per_class.overall();
    (0..partition.len())
        .map(|i| {
            let labels: Vec<usize> = partition.client(i).iter().map(|&j| train.labels()[j]).collect();
            let ratios = class_ratios(&labels, train.classes())?;
            Ok(MetricsRecord {
                run_id: run.into(),
                algorithm: algorithm.into(),
                client_id: Some(i),
                local_acc: per_class.weighted(&ratios)?,
                global_acc,
                seed,
                samples: Some(labels.len()),
                mean_gate: None,
                timestamp: None,
            })
        })
        .collect()
}

pub struct FedavgOutput {
    pub checkpoint_path: PathBuf,
    pub rounds_path: PathBuf,
    pub clients_path: PathBuf,
    pub best_round: usize,
    pub best_accuracy: f64,
    pub records: Vec<MetricsRecord>,
}

pub fn cmd_fedavg(cfg: &ExperimentConfig) -> Result<FedavgOutput> {
    prepare(cfg)?;
    let (train, test) = cfg.load_data()?;
    let partition = load_partition(cfg, &train)?;
    let spec = cfg.model_spec(train.channels(), train.classes())?;
    let fed = cfg.fed_config();
    info!(
        "fedavg: {} rounds, {} of {} clients per round, model {}",
        fed.rounds,
        fed.clients_per_round(partition.len()),
        partition.len(),
        spec.id()
    );
    let run = train_federated(&train, &partition, &spec, &fed, |theta: &ModelParams| {
        global_test(theta, &test)
    })?;
    info!("best global accuracy {:.4} at round {}", run.best.accuracy, run.best.round);

    let dir = &cfg.out_dir;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let hash = save_global(&checkpoint_path, &run.best, cfg.seed)?;
    let rounds_path = dir.join(ROUNDS_FILE);
    metrics::write_rounds_csv(&rounds_path, &run.rounds)?;

    let per_class = PerClassAccuracy::compute(&run.best.params, &test)?;
    let run_id = run_id(cfg);
    let records = client_records(&run_id, "fedavg", cfg.seed, &per_class, &train, &partition)?;
    let clients_path = dir.join(FEDAVG_CLIENTS_FILE);
    metrics::write_records_csv(&clients_path, &records)?;

    let mut manifest = RunManifest::new("fedavg", cfg);
    manifest.checkpoints.insert(CHECKPOINT_FILE.into(), hash);
    manifest.write(dir)?;
    Ok(FedavgOutput {
        checkpoint_path,
        rounds_path,
        clients_path,
        best_round: run.best.round,
        best_accuracy: run.best.accuracy,
        records,
    })
}

pub struct PersonalizeOutput {
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
    pub artifact_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

pub fn artifact_path(dir: &Path, algorithm: Algorithm, client: usize) -> PathBuf {
    dir.join("clients")
        .join(algorithm.as_str())
        .join(format!("client_{client:04}.fmck"))
}

fn timestamp() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

/// Runs one personalization algorithm for every client. `checkpoint` defaults
/// to the FedAvg checkpoint in the output directory; the Local baseline does
/// not need one.
pub fn cmd_personalize(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    checkpoint: Option<&Path>,
) -> Result<PersonalizeOutput> {
    prepare(cfg)?;
    let (train, test) = cfg.load_data()?;
    let partition = load_partition(cfg, &train)?;
    let spec = cfg.model_spec(train.channels(), train.classes())?;
    let dir = &cfg.out_dir;

    let ckpt_path = checkpoint.map_or_else(|| dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let global = if algorithm == Algorithm::Local {
        build_model(&spec, init_seed(cfg.seed))?
    } else {
        if !ckpt_path.exists() {
            return Err(Error::Usage(format!(
                "{} not found; run `fedmoe fedavg` first or pass --checkpoint",
                ckpt_path.display()
            )));
        }
        let ckpt = load_global(&ckpt_path)?;
        if ckpt.params.spec() != &spec {
            return Err(Error::Usage(format!(
                "checkpoint model {} does not match configured model {}",
                ckpt.params.spec().id(),
                spec.id()
            )));
        }
        ckpt.params
    };
    let global = Arc::new(global.split());

    let pcfg = cfg.personalization.resolve(algorithm);
    let local_cfg = cfg.local_config();
    let seed = derive_seed(cfg.seed, &[TAG_PERSONALIZE]);
    let run_id = run_id(cfg);
    let artifact_dir = dir.join("clients").join(algorithm.as_str());
    std::fs::create_dir_all(&artifact_dir).map_err(|e| Error::io(&artifact_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    info!("personalize: {algorithm} on {} clients", partition.len());
    let results: Vec<(MetricsRecord, String)> = pool.install(|| {
        (0..partition.len())
            .into_par_iter()
            .map(|i| {
                let indices = partition.client(i);
                let client = personalize_client(
                    algorithm,
                    i,
                    &train,
                    indices,
                    Arc::clone(&global),
                    &pcfg,
                    &local_cfg,
                    seed,
                )
                .map_err(|e| match e {
                    Error::DegenerateClient(m) => Error::DegenerateClient(format!("client {i}: {m}")),
                    other => other,
                })?;
                let labels: Vec<usize> = indices.iter().map(|&j| train.labels()[j]).collect();
                let ratios = class_ratios(&labels, train.classes())?;
                let acc = PerClassAccuracy::compute(&client, &test)?;
                let hash = write_bytes(&artifact_path(dir, algorithm, i), &encode_personalized(&client)?)?;
                let record = MetricsRecord {
                    run_id: run_id.clone(),
                    algorithm: algorithm.as_str().into(),
                    client_id: Some(i),
                    local_acc: acc.weighted(&ratios)?,
                    global_acc: acc.overall(),
                    seed: cfg.seed,
                    samples: Some(indices.len()),
                    mean_gate: client.mean_gate,
                    timestamp: None,
                };
                log::debug!("client {i}: local {:.4} global {:.4}", record.local_acc, record.global_acc);
                Ok((record, hash))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut manifest = RunManifest::new(&format!("personalize_{algorithm}"), cfg);
    manifest.algorithm = Some(algorithm);
    if algorithm != Algorithm::Local {
        let bytes = std::fs::read(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
        manifest.checkpoints.insert(CHECKPOINT_FILE.into(), checkpoint::sha256_hex(&bytes));
    }
    manifest.seeds.insert("personalization".into(), seed);
    let mut records = Vec::with_capacity(results.len());
    for (r, hash) in results {
        let name = artifact_path(Path::new(""), algorithm, r.client_id.expect("client row"));
        manifest.checkpoints.insert(name.display().to_string(), hash);
        records.push(r);
    }

    let csv_path = dir.join(format!("personalize_{algorithm}.csv"));
    metrics::write_records_csv(&csv_path, &records)?;
    let stamp = timestamp();
    let stamped: Vec<MetricsRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.timestamp = Some(stamp.clone());
            r
        })
        .collect();
    let jsonl_path = dir.join(format!("personalize_{algorithm}.jsonl"));
    metrics::write_records_jsonl(&jsonl_path, &stamped)?;
    manifest.write(dir)?;
    Ok(PersonalizeOutput {
        csv_path,
        jsonl_path,
        artifact_dir,
        records,
    })
}

pub struct ReportOutput {
    pub summary: Summary,
    pub summary_path: PathBuf,
    pub deltas_path: PathBuf,
}

/// Aggregates metrics files (CSV or JSONL) into the summary and delta tables.
pub fn cmd_report(files: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    if files.is_empty() {
        return Err(Error::Usage("report needs at least one metrics file".into()));
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(metrics::read_records(f)?);
    }
    let summary = summarize(&records);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    let deltas_path = out_dir.join(DELTAS_FILE);
    metrics::write_summary_csv(&summary_path, &summary)?;
    metrics::write_deltas_csv(&deltas_path, &summary)?;
    Ok(ReportOutput {
        summary,
        summary_path,
        deltas_path,
    })
}
