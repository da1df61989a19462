mod common;

use common::separable;
use fedmoe::data::{dirichlet_partition, ClientPartition, PartitionSpec};
use fedmoe::evaluation::global_test;
use fedmoe::federation::{
    aggregate, client_seed, init_seed, local_update, sample_clients, train_federated, ClientUpdate, FedConfig,
    Weighting,
};
use fedmoe::models::{build_model, model_loss_and_grad, ModelParams, ModelSpec};
use fedmoe::numerics::{sgd_step, OptimizerState, SgdConfig, Tensor};
use fedmoe::training::train_minibatch;
use proptest::prelude::*;

fn small_spec() -> ModelSpec {
    ModelSpec::mlp(1, vec![16], 10)
}

fn cfg(rounds: usize, participation: f64) -> FedConfig {
    FedConfig {
        rounds,
        participation,
        local_epochs: 2,
        local_batch: 10,
        sgd: SgdConfig::with_momentum(0.01, 0.5),
        weighting: Weighting::SampleCount,
        eval_every: 1,
        seed: 17,
        workers: 1,
    }
}

#[test]
fn zero_local_epochs_returns_theta() {
    let (train, _) = separable(5, 1, 1);
    let theta = build_model(&small_spec(), 1).unwrap();
    let mut c = cfg(1, 1.0);
    c.local_epochs = 0;
    let idx: Vec<usize> = (0..train.len()).collect();
    let (out, n) = local_update(&theta, &train, &idx, &c, 3).unwrap();
    assert_eq!(out, theta);
    assert_eq!(n, train.len());
}

#[test]
fn one_full_batch_epoch_is_one_sgd_step() {
    let (train, _) = separable(3, 1, 2);
    let spec = small_spec();
    let theta = build_model(&spec, 2).unwrap();
    let idx: Vec<usize> = (0..train.len()).collect();
    let mut c = cfg(1, 1.0);
    c.local_epochs = 1;
    c.local_batch = train.len();
    let (out, _) = local_update(&theta, &train, &idx, &c, 5).unwrap();

    // The mean loss is invariant to example order, so one step on the whole
    // set in natural order is the oracle.
    let (x, y) = train.batch(&idx).unwrap();
    let (_, grads) = model_loss_and_grad(&spec, theta.tensors(), &x, &y).unwrap();
    let mut want = theta.clone().into_tensors();
    let mut st = OptimizerState::new(&want);
    sgd_step(&mut want, &grads, &mut st, &c.sgd).unwrap();
    for (a, b) in out.tensors().iter().zip(&want) {
        assert!(common::max_abs_diff(a, b) < 1e-12);
    }
}

#[test]
fn local_loss_decreases_on_separable_data() {
    let (train, _) = separable(10, 1, 3);
    let spec = small_spec();
    let mut params = build_model(&spec, 3).unwrap().into_tensors();
    let losses = train_minibatch(&mut params, train.len(), 5, 10, &SgdConfig::with_momentum(0.01, 0.5), 4, |p, b| {
        let (x, y) = train.batch(b)?;
        model_loss_and_grad(&spec, p, &x, &y)
    })
    .unwrap();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

fn upd(client: usize, v: f64, samples: usize) -> ClientUpdate {
    ClientUpdate {
        client,
        params: vec![Tensor::vector(vec![v, -v])],
        samples,
    }
}

#[test]
fn aggregate_hand_oracles() {
    let single = aggregate(&[upd(4, 1.25, 7)], Weighting::SampleCount).unwrap();
    assert_eq!(single[0].data(), [1.25, -1.25]);
    let sym = aggregate(&[upd(0, 3.0, 5), upd(1, -3.0, 5)], Weighting::SampleCount).unwrap();
    assert_eq!(sym[0].data(), [0.0, 0.0]);
    let w = aggregate(&[upd(0, 0.0, 1), upd(1, 4.0, 3)], Weighting::SampleCount).unwrap();
    assert_eq!(w[0].data(), [3.0, -3.0]);
    let u = aggregate(&[upd(0, 0.0, 1), upd(1, 4.0, 3)], Weighting::Uniform).unwrap();
    assert_eq!(u[0].data(), [2.0, -2.0]);
}

#[test]
fn degenerate_federation_equals_centralized_sgd() {
    let (train, _) = separable(6, 1, 4);
    let spec = small_spec();
    let partition = ClientPartition { clients: vec![(0..train.len()).collect()] };
    let c = cfg(1, 1.0);
    let run = train_federated(&train, &partition, &spec, &c, |_| Ok(0.0)).unwrap();

    let mut central = build_model(&spec, init_seed(c.seed)).unwrap();
    train_minibatch(
        central.tensors_mut(),
        train.len(),
        c.local_epochs,
        c.local_batch,
        &c.sgd,
        client_seed(c.seed, 1, 0),
        |p, b| {
            let (x, y) = train.batch(b)?;
            model_loss_and_grad(&spec, p, &x, &y)
        },
    )
    .unwrap();
    assert_eq!(run.last, central);
}

#[test]
fn zero_rounds_returns_initial_model() {
    let (train, test) = separable(5, 2, 5);
    let spec = small_spec();
    let partition = dirichlet_partition(&train, &PartitionSpec { clients: 4, concentration: 0.5, seed: 1 }).unwrap();
    let c = cfg(0, 0.5);
    let run = train_federated(&train, &partition, &spec, &c, |m: &ModelParams| global_test(m, &test)).unwrap();
    assert_eq!(run.best.round, 0);
    assert_eq!(run.best.params, build_model(&spec, init_seed(c.seed)).unwrap());
    assert!(run.rounds.is_empty());
}

#[test]
fn identical_clients_average_to_one_update() {
    let (train, _) = separable(4, 1, 6);
    let spec = small_spec();
    let all: Vec<usize> = (0..train.len()).collect();
    let c = cfg(1, 1.0);
    let theta = build_model(&spec, 1).unwrap();
    let (one, n) = local_update(&theta, &train, &all, &c, 9).unwrap();
    let updates: Vec<ClientUpdate> = (0..3)
        .map(|k| ClientUpdate { client: k, params: one.tensors().to_vec(), samples: n })
        .collect();
    let avg = aggregate(&updates, Weighting::SampleCount).unwrap();
    for (a, b) in avg.iter().zip(one.tensors()) {
        assert!(common::max_abs_diff(a, b) < 1e-15);
    }
}

#[test]
fn sampling_is_seeded_sorted_and_distinct() {
    let c = cfg(3, 0.1);
    let s = sample_clients(100, &c, 2);
    assert_eq!(s.len(), 10);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s, sample_clients(100, &c, 2));
    assert_ne!(s, sample_clients(100, &c, 3));
    assert_eq!(sample_clients(7, &cfg(1, 0.01), 1).len(), 1);
}

#[test]
fn determinism_across_worker_counts() {
    let (train, test) = separable(8, 2, 7);
    let spec = small_spec();
    let partition = dirichlet_partition(&train, &PartitionSpec { clients: 8, concentration: 0.5, seed: 2 }).unwrap();
    let mut c = cfg(3, 0.5);
    let eval = |m: &ModelParams| global_test(m, &test);
    c.workers = 1;
    let a = train_federated(&train, &partition, &spec, &c, eval).unwrap();
    c.workers = 4;
    let b = train_federated(&train, &partition, &spec, &c, eval).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.best.params, b.best.params);
    assert_eq!(a.rounds, b.rounds);
}

#[test]
fn best_checkpoint_is_running_max() {
    let (train, test) = separable(8, 3, 8);
    let spec = small_spec();
    let partition = dirichlet_partition(&train, &PartitionSpec { clients: 6, concentration: 0.5, seed: 3 }).unwrap();
    let c = cfg(6, 0.5);
    let run = train_federated(&train, &partition, &spec, &c, |m: &ModelParams| global_test(m, &test)).unwrap();
    let max = run.rounds.iter().map(|r| r.global_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.best.accuracy, max);
    let first_best = run.rounds.iter().find(|r| r.global_acc == max).unwrap();
    assert_eq!(run.best.round, first_best.round);
    assert_eq!(global_test(&run.best.params, &test).unwrap(), max);
}

#[test]
fn twenty_clients_reach_ninety_percent() {
    let (train, test) = separable(40, 20, 9);
    let spec = ModelSpec::mlp(1, vec![64], 10);
    let partition = dirichlet_partition(&train, &PartitionSpec { clients: 20, concentration: 0.5, seed: 4 }).unwrap();
    let mut c = cfg(30, 0.25);
    c.workers = 0;
    let run = train_federated(&train, &partition, &spec, &c, |m: &ModelParams| global_test(m, &test)).unwrap();
    assert!(run.best.accuracy >= 0.9, "best accuracy {}", run.best.accuracy);
}

#[test]
fn invalid_participation_is_config_error() {
    let (train, _) = separable(2, 1, 1);
    let partition = ClientPartition { clients: vec![(0..train.len()).collect()] };
    let r = train_federated(&train, &partition, &small_spec(), &cfg(1, 0.0), |_| Ok(0.0));
    assert!(matches!(r, Err(fedmoe::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_permutation_invariant(
        vals in prop::collection::vec((-10.0f64..10.0, 1usize..50), 1..8),
        seed in 0u64..1000,
    ) {
        let updates: Vec<ClientUpdate> = vals.iter().enumerate().map(|(k, &(v, n))| upd(k, v, n)).collect();
        let mut shuffled = updates.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut common::rng(seed));
        for w in [Weighting::SampleCount, Weighting::Uniform] {
            let a = aggregate(&updates, w).unwrap();
            let b = aggregate(&shuffled, w).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
