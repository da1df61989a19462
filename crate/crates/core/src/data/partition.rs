//! Dirichlet non-IID allocation of examples to clients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Dirichlet concentration; larger means closer to IID.
    pub concentration: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("partition.clients must be >= 1"));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::config(format!(
                "partition.concentration must be > 0, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Per-client example indices; a set partition of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub clients: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.clients[id]
    }

    /// `[client][class]` example counts.
    pub fn histogram(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Checks the disjoint-cover and nonempty-client invariants against a
    /// dataset of `n` examples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Input(format!("client {c} is empty")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::Input(format!("client {c} holds index {i} >= {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Input(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Input(format!("index {missing} not assigned")));
        }
        Ok(())
    }
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, concentration: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // every draw underflowed; the limit is a single owner
        p.fill(0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    p
}

/// Integer counts summing to `total` from proportions, by largest remainder
/// (ties go to the lower client id).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// For each class, draws `p ~ Dir(α·1_N)` and deals that class's (shuffled)
/// examples to clients in proportions `p`. Clients left empty take one
/// example from the current largest client.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<ClientPartition> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if spec.clients > ds.len() {
        return Err(Error::config(format!(
            "partition.clients = {} exceeds dataset size {}",
            spec.clients,
            ds.len()
        )));
    }
    let mut clients = vec![Vec::new(); spec.clients];
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[class as u64]));
        idx.shuffle(&mut rng);
        let p = sample_dirichlet(&mut rng, spec.concentration, spec.clients);
        let counts = largest_remainder(&p, idx.len());
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            clients[client].extend_from_slice(&idx[start..start + count]);
            start += count;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..clients.len())
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let pos = (0..clients[donor].len())
            .max_by_key(|&j| clients[donor][j])
            .expect("donor nonempty");
        let moved = clients[donor].swap_remove(pos);
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(ClientPartition { clients })
}

/// A client's adaptation subset and gate-training subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub per_indices: Vec<usize>,
    pub gate_indices: Vec<usize>,
    pub split_ratio: f64,
}

/// Seeded shuffle, then the first `⌈ratio·n⌉` go to the adaptation subset and
/// the rest to the gate subset. Both sides keep at least one example.
pub fn split_per_gate(client_indices: &[usize], ratio: f64, seed: u64) -> Result<ClientSplit> {
    let n = client_indices.len();
    if n < 2 {
        return Err(Error::DegenerateClient(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut idx = client_indices.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // tolerate representation error in ratio·n before taking the ceiling
    let n_per = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let gate_indices = idx.split_off(n_per);
    Ok(ClientSplit {
        per_indices: idx,
        gate_indices,
        split_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.6, 0.3], 10), vec![1, 6, 3]);
        let c = largest_remainder(&[0.33, 0.33, 0.34], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn split_sizes() {
        let idx: Vec<usize> = (0..10).collect();
        let s = split_per_gate(&idx, 0.5, 1).unwrap();
        assert_eq!((s.per_indices.len(), s.gate_indices.len()), (5, 5));
        let s = split_per_gate(&idx, 0.9, 1).unwrap();
        assert_eq!((s.per_indices.len(), s.gate_indices.len()), (9, 1));
        assert_eq!(split_per_gate(&idx, 0.9, 1).unwrap(), s);
        let s = split_per_gate(&idx, 0.99, 1).unwrap();
        assert_eq!(s.gate_indices.len(), 1);
    }

    #[test]
    fn degenerate_client() {
        assert!(matches!(
            split_per_gate(&[4], 0.8, 0),
            Err(Error::DegenerateClient(_))
        ));
    }
}
