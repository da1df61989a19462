//! FedAvg: per-round client sampling, local SGD from the current global model,
//! weighted parameter averaging, and best-checkpoint tracking.

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{build_model, model_loss_and_grad, ModelParams, ModelSpec};
use crate::numerics::{SgdConfig, Tensor};
use crate::seed::derive_seed;
use crate::training::train_minibatch;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_SAMPLE: u64 = 0x7361_6d70;
const TAG_LOCAL: u64 = 0x6c6f_6361;

/// How client updates are weighted when averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `n_k / Σ n`
    #[default]
    SampleCount,
    /// `1 / K`
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub sgd: SgdConfig,
    pub weighting: Weighting,
    /// Evaluate every this many rounds (the last round is always evaluated).
    pub eval_every: usize,
    pub seed: u64,
    /// Worker threads for client updates; 0 lets the pool decide.
    pub workers: usize,
}

impl FedConfig {
    pub fn clients_per_round(&self, clients: usize) -> usize {
        ((self.participation * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients.max(1))
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "fedavg.participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if (self.participation * clients as f64).ceil() < 1.0 {
            return Err(Error::config("fedavg.participation selects no clients"));
        }
        if self.local_batch == 0 {
            return Err(Error::config("fedavg.local_batch must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("fedavg.eval_every must be >= 1"));
        }
        self.sgd.validate("fedavg.sgd")
    }
}

/// Seed of the initial global model.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[TAG_INIT])
}

/// Shuffle seed used by `client` during `round` (1-based).
pub fn client_seed(seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(seed, &[TAG_LOCAL, round as u64, client as u64])
}

/// `⌈c·N⌉` distinct clients for `round`, ascending.
pub fn sample_clients(clients: usize, cfg: &FedConfig, round: usize) -> Vec<usize> {
    let k = cfg.clients_per_round(clients);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SAMPLE, round as u64]));
    let mut picked = sample(&mut rng, clients, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `e` epochs of minibatch SGD on one client's examples, starting from `theta`.
pub fn local_update(
    theta: &ModelParams,
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &FedConfig,
    shuffle_seed: u64,
) -> Result<(ModelParams, usize)> {
    if indices.is_empty() {
        return Err(Error::DegenerateClient("local update on an empty client".into()));
    }
    let mut params = theta.clone();
    train_minibatch(
        params.tensors_mut(),
        indices.len(),
        cfg.local_epochs,
        cfg.local_batch,
        &cfg.sgd,
        shuffle_seed,
        |p, batch| {
            let picked: Vec<usize> = batch.iter().map(|&j| indices[j]).collect();
            let (x, y) = ds.batch(&picked)?;
            model_loss_and_grad(theta.spec(), p, &x, &y)
        },
    )?;
    Ok((params, indices.len()))
}

/// One uploaded model.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: Vec<Tensor>,
    pub samples: usize,
}

/// Weighted parameter average. Updates are reduced in ascending client order
/// whatever order they arrive in.
pub fn aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<Vec<Tensor>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Input("aggregate needs at least one update".into()))?;
    for u in updates {
        if u.params.len() != first.params.len()
            || u.params.iter().zip(&first.params).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::dim(format!(
                "update from client {} does not match client {}",
                u.client, first.client
            )));
        }
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let total: usize = order.iter().map(|u| u.samples).sum();
    let weights: Vec<f64> = match weighting {
        Weighting::SampleCount if total > 0 => {
            order.iter().map(|u| u.samples as f64 / total as f64).collect()
        }
        _ => vec![1.0 / order.len() as f64; order.len()],
    };
    let mut out: Vec<Tensor> = first.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (u, &w) in order.iter().zip(&weights) {
        for (acc, p) in out.iter_mut().zip(&u.params) {
            for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GlobalCheckpoint {
    pub round: usize,
    pub params: ModelParams,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub global_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub best: GlobalCheckpoint,
    pub last: ModelParams,
    pub rounds: Vec<RoundRecord>,
}

/// FedAvg from a freshly built model seeded by [`init_seed`].
pub fn train_federated<E>(
    ds: &LabeledDataset,
    partition: &ClientPartition,
    spec: &ModelSpec,
    cfg: &FedConfig,
    eval_hook: E,
) -> Result<FederatedRun>
where
    E: Fn(&ModelParams) -> Result<f64>,
{
    let init = build_model(spec, init_seed(cfg.seed))?;
    train_federated_from(init, ds, partition, cfg, eval_hook)
}

/// FedAvg from a given initial model.
pub fn train_federated_from<E>(
    init: ModelParams,
    ds: &LabeledDataset,
    partition: &ClientPartition,
    cfg: &FedConfig,
    eval_hook: E,
) -> Result<FederatedRun>
where
    E: Fn(&ModelParams) -> Result<f64>,
{
    cfg.validate(partition.len())?;
    partition.validate(ds.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    let mut theta = init;
    let mut best: Option<GlobalCheckpoint> = None;
    let mut rounds = Vec::new();
    for round in 1..=cfg.rounds {
        let sampled = sample_clients(partition.len(), cfg, round);
        let updates: Vec<ClientUpdate> = pool.install(|| {
            sampled
                .par_iter()
                .map(|&client| {
                    let seed = client_seed(cfg.seed, round, client);
                    let (p, n) = local_update(&theta, ds, partition.client(client), cfg, seed)?;
                    Ok(ClientUpdate {
                        client,
                        params: p.into_tensors(),
                        samples: n,
                    })
                })
                .collect::<Result<_>>()
        })?;
        let averaged = aggregate(&updates, cfg.weighting)?;
        theta = ModelParams::from_tensors(theta.spec().clone(), averaged)?;

        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let acc = eval_hook(&theta)?;
            debug!("round {round}: clients {sampled:?}, global acc {acc:.4}");
            if best.as_ref().is_none_or(|b| acc > b.accuracy) {
                best = Some(GlobalCheckpoint {
                    round,
                    params: theta.clone(),
                    accuracy: acc,
                });
            }
            rounds.push(RoundRecord {
                round,
                sampled,
                global_acc: acc,
            });
        }
    }
    let best = match best {
        Some(b) => b,
        None => GlobalCheckpoint {
            round: 0,
            accuracy: eval_hook(&theta)?,
            params: theta.clone(),
        },
    };
    info!("fedavg finished: best round {} acc {:.4}", best.round, best.accuracy);
    Ok(FederatedRun {
        best,
        last: theta,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(client: usize, v: f64, samples: usize) -> ClientUpdate {
        ClientUpdate {
            client,
            params: vec![Tensor::full(&[2], v)],
            samples,
        }
    }

    #[test]
    fn single_update_unchanged() {
        let u = ClientUpdate {
            client: 3,
            params: vec![Tensor::vector(vec![0.1, -7.25, 3.3])],
            samples: 17,
        };
        let out = aggregate(std::slice::from_ref(&u), Weighting::SampleCount).unwrap();
        assert_eq!(out, u.params);
    }

    #[test]
    fn symmetric_pair_cancels() {
        let out = aggregate(&[upd(0, 1.5, 4), upd(1, -1.5, 4)], Weighting::SampleCount).unwrap();
        assert_eq!(out[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn sample_vs_uniform_weighting() {
        let ups = [upd(0, 0.0, 1), upd(1, 4.0, 3)];
        assert_eq!(aggregate(&ups, Weighting::SampleCount).unwrap()[0].data(), &[3.0, 3.0]);
        assert_eq!(aggregate(&ups, Weighting::Uniform).unwrap()[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let bad = ClientUpdate {
            client: 1,
            params: vec![Tensor::zeros(&[3])],
            samples: 1,
        };
        assert!(matches!(
            aggregate(&[upd(0, 1.0, 1), bad], Weighting::Uniform),
            Err(Error::Dimension(_))
        ));
        assert!(aggregate(&[], Weighting::Uniform).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let cfg = FedConfig {
            rounds: 1,
            participation: 0.3,
            local_epochs: 1,
            local_batch: 1,
            sgd: SgdConfig::plain(0.1),
            weighting: Weighting::SampleCount,
            eval_every: 1,
            seed: 5,
            workers: 1,
        };
        let a = sample_clients(20, &cfg, 4);
        assert_eq!(a.len(), 6);
        assert_eq!(a, sample_clients(20, &cfg, 4));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 6);
        assert_eq!(cfg.clients_per_round(100), 30);
    }
}
