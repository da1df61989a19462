//! Local and global test protocols, class ratios, and per-algorithm summaries.
//!
//! The local test reweights per-class accuracy on the shared test set by a
//! client's training class ratios; the global test is plain accuracy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Predictor;

const EVAL_BATCH: usize = 256;

/// Training-set class composition of one client; sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRatios(pub Vec<f64>);

impl ClassRatios {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn class_ratios(labels: &[usize], classes: usize) -> Result<ClassRatios> {
    if labels.is_empty() {
        return Err(Error::Evaluation("class ratios of an empty label set".into()));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Input(format!("label {y} outside [0, {classes})")));
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    Ok(ClassRatios(counts.into_iter().map(|c| c as f64 / n).collect()))
}

/// Argmax predictions (lowest index on ties) for every example.
pub fn predict_labels(predictor: &dyn Predictor, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(<[usize]>::to_vec)
        .collect();
    let preds: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|idx| {
            let (x, _) = ds.batch(idx)?;
            Ok(predictor.logits(&x)?.argmax_rows())
        })
        .collect::<Result<_>>()?;
    Ok(preds.concat())
}

/// Correct/total counts per class on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAccuracy {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl PerClassAccuracy {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Self {
        let mut correct = vec![0; classes];
        let mut total = vec![0; classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            total[y] += 1;
            if p == y {
                correct[y] += 1;
            }
        }
        Self { correct, total }
    }

    pub fn compute(predictor: &dyn Predictor, test: &LabeledDataset) -> Result<Self> {
        let preds = predict_labels(predictor, test)?;
        Ok(Self::from_predictions(&preds, test.labels(), test.classes()))
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        (self.total[class] > 0).then(|| self.correct[class] as f64 / self.total[class] as f64)
    }

    pub fn overall(&self) -> f64 {
        let n: usize = self.total.iter().sum();
        if n == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / n as f64
    }

    /// `Σ_c ratios[c]·acc_c`.
    pub fn weighted(&self, ratios: &ClassRatios) -> Result<f64> {
        if ratios.0.len() != self.total.len() {
            return Err(Error::Evaluation(format!(
                "{} ratios for {} test classes",
                ratios.0.len(),
                self.total.len()
            )));
        }
        let mut acc = 0.0;
        for (c, &r) in ratios.0.iter().enumerate() {
            if r > 0.0 {
                let a = self.class_accuracy(c).ok_or_else(|| {
                    Error::Evaluation(format!("class {c} has weight {r} but no test examples"))
                })?;
                acc += r * a;
            }
        }
        Ok(acc)
    }
}

pub fn global_test(predictor: &dyn Predictor, test: &LabeledDataset) -> Result<f64> {
    Ok(PerClassAccuracy::compute(predictor, test)?.overall())
}

pub fn local_test(predictor: &dyn Predictor, test: &LabeledDataset, ratios: &ClassRatios) -> Result<f64> {
    PerClassAccuracy::compute(predictor, test)?.weighted(ratios)
}

/// One row of per-client results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub algorithm: String,
    /// `None` for aggregate rows.
    pub client_id: Option<usize>,
    pub local_acc: f64,
    pub global_acc: f64,
    pub seed: u64,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub mean_gate: Option<f64>,
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub clients: usize,
    pub mean_local: f64,
    pub mean_global: f64,
    /// Means weighted by client sample counts, when every record carries one.
    pub weighted_local: Option<f64>,
    pub weighted_global: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub algorithm: String,
    pub client_id: usize,
    pub fedavg_local: f64,
    pub delta_local: f64,
    pub delta_global: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub deltas: Vec<DeltaRow>,
}

fn algorithm_rank(name: &str) -> (usize, String) {
    const ORDER: [&str; 6] = ["local", "fedavg", "pfl_ft", "pfl_fb", "pfl_mf", "pfl_mfe"];
    let rank = ORDER.iter().position(|a| *a == name).unwrap_or(ORDER.len());
    (rank, name.to_string())
}

/// Per-algorithm means over client records, plus per-client deltas against the
/// `fedavg` records when present.
pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let mut groups: BTreeMap<(usize, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.client_id.is_some()) {
        groups.entry(algorithm_rank(&r.algorithm)).or_default().push(r);
    }
    let rows = groups
        .iter()
        .map(|((_, name), rs)| {
            let n = rs.len() as f64;
            let weighted = |f: fn(&MetricsRecord) -> f64| -> Option<f64> {
                let total: usize = rs.iter().map(|r| r.samples).sum::<Option<usize>>()?;
                (total > 0).then(|| {
                    rs.iter()
                        .map(|r| r.samples.unwrap() as f64 / total as f64 * f(r))
                        .sum()
                })
            };
            SummaryRow {
                algorithm: name.clone(),
                clients: rs.len(),
                mean_local: rs.iter().map(|r| r.local_acc).sum::<f64>() / n,
                mean_global: rs.iter().map(|r| r.global_acc).sum::<f64>() / n,
                weighted_local: weighted(|r| r.local_acc),
                weighted_global: weighted(|r| r.global_acc),
            }
        })
        .collect();

    let fedavg: BTreeMap<usize, &MetricsRecord> = records
        .iter()
        .filter(|r| r.algorithm == "fedavg")
        .filter_map(|r| r.client_id.map(|c| (c, r)))
        .collect();
    let mut deltas = Vec::new();
    if !fedavg.is_empty() {
        for ((_, name), rs) in &groups {
            let mut sorted = rs.clone();
            sorted.sort_by_key(|r| r.client_id);
            for r in sorted {
                let c = r.client_id.unwrap();
                if let Some(base) = fedavg.get(&c) {
                    deltas.push(DeltaRow {
                        algorithm: name.clone(),
                        client_id: c,
                        fedavg_local: base.local_acc,
                        delta_local: r.local_acc - base.local_acc,
                        delta_global: r.global_acc - base.global_acc,
                    });
                }
            }
        }
    }
    Summary { rows, deltas }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    struct Fixed(Vec<usize>, usize);

    impl Predictor for Fixed {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            // picks label from the first pixel's bucket: tests only feed indices
            let rows = (0..x.rows())
                .map(|i| {
                    let id = x.row(i)[0] as usize;
                    let mut r = vec![0.0; self.1];
                    r[self.0[id]] = 1.0;
                    r
                })
                .collect::<Vec<_>>();
            Tensor::from_rows(&rows)
        }
    }

    fn indexed_dataset(labels: &[usize], classes: usize) -> LabeledDataset {
        let n = labels.len();
        let data = (0..n).map(|i| i as f64).collect();
        LabeledDataset::new(Tensor::new(vec![n, 1, 1, 1], data).unwrap(), labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn ratios_basic() {
        assert_eq!(class_ratios(&[0, 0, 1, 1], 2).unwrap().0, vec![0.5, 0.5]);
        assert_eq!(class_ratios(&[2, 2], 3).unwrap().0, vec![0.0, 0.0, 1.0]);
        assert!(class_ratios(&[], 2).is_err());
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let ds = indexed_dataset(&labels, 10);
        assert_eq!(global_test(&Fixed(labels.clone(), 10), &ds).unwrap(), 1.0);
        assert!((global_test(&Fixed(vec![3; 50], 10), &ds).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn local_test_one_hot_and_uniform() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut preds = labels.clone();
        preds[0] = 1; // class 0 loses one of ten
        preds[5] = 0; // class 1 loses one
        preds[9] = 0;
        let ds = indexed_dataset(&labels, 4);
        let p = Fixed(preds, 4);
        let one_hot = ClassRatios(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((local_test(&p, &ds, &one_hot).unwrap() - 0.9).abs() < 1e-15);
        let uniform = ClassRatios(vec![0.25; 4]);
        let g = global_test(&p, &ds).unwrap();
        assert!((local_test(&p, &ds, &uniform).unwrap() - g).abs() < 1e-15);
    }

    #[test]
    fn local_test_missing_class_is_error() {
        let ds = indexed_dataset(&[0, 0, 1], 3);
        let p = Fixed(vec![0, 0, 1], 3);
        let r = ClassRatios(vec![0.5, 0.0, 0.5]);
        assert!(matches!(local_test(&p, &ds, &r), Err(Error::Evaluation(_))));
    }

    fn rec(alg: &str, c: usize, l: f64, g: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            algorithm: alg.into(),
            client_id: Some(c),
            local_acc: l,
            global_acc: g,
            seed: 0,
            samples: None,
            mean_gate: None,
            timestamp: None,
        }
    }

    #[test]
    fn summarize_means_and_self_deltas() {
        let s = summarize(&[rec("fedavg", 0, 0.8, 0.7), rec("fedavg", 1, 0.6, 0.7)]);
        assert_eq!(s.rows.len(), 1);
        assert!((s.rows[0].mean_local - 0.7).abs() < 1e-15);
        assert!(s.deltas.iter().all(|d| d.delta_local == 0.0 && d.delta_global == 0.0));
        let one = summarize(&[rec("pfl_fb", 4, 0.9, 0.5)]);
        assert_eq!(one.rows[0].mean_local, 0.9);
        assert!(one.deltas.is_empty());
    }
}
