//! Quick built-in checks of the core properties, run by `fedmoe selftest`.
//! The full suites live in the integration tests; these are small enough to
//! finish in a few seconds on any machine.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{dirichlet_partition, make_synthetic, PartitionSpec, SyntheticSpec};
use crate::error::Result;
use crate::evaluation::{class_ratios, global_test, local_test};
use crate::federation::{aggregate, ClientUpdate, Weighting};
use crate::models::{build_model, model_loss_and_grad, GateInput, GatingParams, ModelSpec, Predictor};
use crate::numerics::{mix_rows, Tensor};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Central-difference check of a few LeNet-5 parameters.
fn gradient_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = ModelSpec::lenet5(1, 10);
    let mut model = build_model(&spec, 3)?;
    let x = random_tensor(&[2, 1, 32, 32], &mut rng);
    let y = vec![3, 7];
    let (_, grads) = model_loss_and_grad(&spec, model.tensors(), &x, &y)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, grad) in grads.iter().enumerate() {
        for _ in 0..3 {
            let k = rng.random_range(0..model.tensors()[p].len());
            let orig = model.tensors()[p].data()[k];
            model.tensors_mut()[p].data_mut()[k] = orig + h;
            let up = model_loss_and_grad(&spec, model.tensors(), &x, &y)?.0;
            model.tensors_mut()[p].data_mut()[k] = orig - h;
            let down = model_loss_and_grad(&spec, model.tensors(), &x, &y)?.0;
            model.tensors_mut()[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(Check {
        name: "lenet5 gradients match finite differences",
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.2e}"),
    })
}

fn mixing_boundaries() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..200 {
        let g = random_tensor(&[4, 10], &mut rng);
        let l = random_tensor(&[4, 10], &mut rng);
        let ones = Tensor::full(&[4, 1], 1.0);
        let zeros = Tensor::zeros(&[4, 1]);
        if mix_rows(&ones, &g, &l)?.argmax_rows() != g.argmax_rows() {
            violations += 1;
        }
        if mix_rows(&zeros, &g, &l)?.argmax_rows() != l.argmax_rows() {
            violations += 1;
        }
    }
    let gate = GatingParams::zeros(8, GateInput::Feature);
    let half = gate.forward_batch(&random_tensor(&[3, 8], &mut rng))?;
    let zero_init_ok = half.data().iter().all(|&v| v == 0.5);
    Ok(Check {
        name: "mixing boundaries and zero-init gate",
        passed: violations == 0 && zero_init_ok,
        detail: format!("{violations} argmax violations, zero-init gate 0.5: {zero_init_ok}"),
    })
}

fn partition_invariants() -> Result<Check> {
    let ds = make_synthetic(&SyntheticSpec::new(10, 30, 1, 0.2, 1))?;
    let spec = PartitionSpec {
        clients: 20,
        concentration: 0.5,
        seed: 9,
    };
    let a = dirichlet_partition(&ds, &spec)?;
    let b = dirichlet_partition(&ds, &spec)?;
    let valid = a.validate(ds.len()).is_ok();
    let hist = a.histogram(ds.labels(), ds.classes());
    let conserved = (0..ds.classes()).all(|c| hist.iter().map(|h| h[c]).sum::<usize>() == 30);
    Ok(Check {
        name: "dirichlet partition cover, conservation, determinism",
        passed: valid && conserved && a == b,
        detail: format!("valid {valid}, conserved {conserved}, deterministic {}", a == b),
    })
}

struct FirstPixel;

impl Predictor for FirstPixel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (b, w) = (x.rows(), x.row_len());
        let mut out = Tensor::zeros(&[b, 10]);
        for i in 0..b {
            let class = (x.data()[i * w] * 1000.0) as usize % 10;
            out.data_mut()[i * 10 + class] = 1.0;
        }
        Ok(out)
    }
}

fn local_test_identity() -> Result<Check> {
    let ds = make_synthetic(&SyntheticSpec::new(10, 20, 1, 0.3, 4))?;
    let uniform = class_ratios(&(0..10).collect::<Vec<_>>(), 10)?;
    let g = global_test(&FirstPixel, &ds)?;
    let l = local_test(&FirstPixel, &ds, &uniform)?;
    Ok(Check {
        name: "uniform-ratio local test equals global test",
        passed: (g - l).abs() < 1e-12,
        detail: format!("global {g:.6}, local {l:.6}"),
    })
}

fn aggregation_oracles() -> Result<Check> {
    let up = |client, v: f64, samples| ClientUpdate {
        client,
        params: vec![Tensor::vector(vec![v])],
        samples,
    };
    let weighted = aggregate(&[up(0, 0.0, 1), up(1, 4.0, 3)], Weighting::SampleCount)?;
    let uniform = aggregate(&[up(0, 0.0, 1), up(1, 4.0, 3)], Weighting::Uniform)?;
    let sym = aggregate(&[up(0, 2.5, 5), up(1, -2.5, 5)], Weighting::SampleCount)?;
    let ok = weighted[0].data() == [3.0] && uniform[0].data() == [2.0] && sym[0].data() == [0.0];
    Ok(Check {
        name: "aggregation hand oracles",
        passed: ok,
        detail: format!(
            "weighted {:?}, uniform {:?}, symmetric {:?}",
            weighted[0].data(),
            uniform[0].data(),
            sym[0].data()
        ),
    })
}

pub fn run_checks() -> Result<Vec<Check>> {
    Ok(vec![
        gradient_check()?,
        mixing_boundaries()?,
        partition_invariants()?,
        local_test_identity()?,
        aggregation_oracles()?,
    ])
}

/// Runs every check, printing one line each. Returns whether all passed.
pub fn run(out: &mut impl Write) -> Result<bool> {
    let checks = run_checks()?;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag}  {}  ({})", c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}
