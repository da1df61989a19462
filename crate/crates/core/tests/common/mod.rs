//! Helpers shared by the integration tests: random tensors, naive reference
//! implementations and a central-difference gradient checker.
#![allow(dead_code)]

use fedmoe::data::{dirichlet_partition, make_synthetic, make_synthetic_split, LabeledDataset, PartitionSpec, SyntheticSpec};
use fedmoe::numerics::Tensor;
use fedmoe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Low-noise synthetic data that any of the models separates easily.
pub fn separable(per_class: usize, test_per_class: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    make_synthetic_split(&SyntheticSpec::new(10, per_class, 1, 0.1, seed), test_per_class).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn naive_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, fi, fo) = (x.rows(), x.row_len(), w.shape()[1]);
    let mut out = vec![0.0; n * fo];
    for r in 0..n {
        for o in 0..fo {
            let mut acc = b.data()[o];
            for i in 0..fi {
                acc += x.data()[r * fi + i] * w.data()[i * fo + o];
            }
            out[r * fo + o] = acc;
        }
    }
    Tensor::new(vec![n, fo], out).unwrap()
}

pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kk) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = (h - kk + 1, w - kk + 1);
    let at = |t: &Tensor, i: [usize; 4], s: [usize; 4]| t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]];
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for p in 0..kk {
                            for q in 0..kk {
                                acc += at(x, [ni, ci, i + p, j + q], [n, c, h, w])
                                    * at(k, [fi, ci, p, q], [f, c, kk, kk]);
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

pub fn naive_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for p in 0..2 {
                        for q in 0..2 {
                            m = m.max(x.data()[((ni * c + ci) * h + 2 * i + p) * w + 2 * j + q]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![n, c, h / 2, w / 2], out).unwrap()
}

/// Mean negative log softmax probability of the true label, computed the
/// textbook way.
pub fn naive_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.row_len();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += -((row[y] - m).exp() / z).ln();
    }
    total / labels.len() as f64
}

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so exact zeros on both sides
/// do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic[p]` with central differences of `loss` for every
/// coordinate (or `sample` random coordinates per tensor when set).
pub fn check_gradients<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    sample: Option<usize>,
    step: f64,
    rng: &mut ChaCha8Rng,
    mut loss: F,
) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for p in 0..params.len() {
        let n = params[p].len();
        let coords: Vec<usize> = match sample {
            Some(s) if s < n => (0..s).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = params[p].data()[k];
            params[p].data_mut()[k] = orig + step;
            let up = loss(params)?;
            params[p].data_mut()[k] = orig - step;
            let down = loss(params)?;
            params[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = analytic[p].data()[k];
            // Differences below the f64 noise floor of the loss carry no signal.
            if numeric.abs().max(analytic.abs()) < 1e-7 {
                continue;
            }
            max_rel = max_rel.max(rel_err(numeric, analytic));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel, checked })
}
pub mod grad_suite;


pub fn label_dist(hist: &[usize]) -> Vec<f64> {
    let n: usize = hist.iter().sum();
    hist.iter().map(|&c| c as f64 / n as f64).collect()
}

pub fn mean_kl(ds: &LabeledDataset, concentration: f64, seed: u64) -> f64 {
    let p = dirichlet_partition(ds, &PartitionSpec { clients: 20, concentration, seed }).unwrap();
    let global = label_dist(&ds.class_counts());
    let hists = p.histogram(ds.labels(), ds.classes());
    let kls: Vec<f64> = hists
        .iter()
        .map(|h| {
            label_dist(h)
                .iter()
                .zip(&global)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum()
        })
        .collect();
    kls.iter().sum::<f64>() / kls.len() as f64
}

/// Mean client-to-global label KL, averaged over seeds, for each concentration in `alphas`.
pub fn kl_by_concentration(alphas: &[f64], seeds: u64) -> Vec<f64> {
    let ds = make_synthetic(&SyntheticSpec::new(10, 60, 1, 0.2, 3)).unwrap();
    alphas
        .iter()
        .map(|&a| (0..seeds).map(|s| mean_kl(&ds, a, s)).sum::<f64>() / seeds as f64)
        .collect()
}

