//! Per-client personalization: the Local baseline, whole-model fine-tuning,
//! freeze-base classifier tuning, and the two mixture-of-experts variants that
//! blend the personalized classifier with the global one through a learned
//! linear gate.
//!
//! The MoE variants follow one schedule per epoch: an adaptation pass over the
//! adaptation subset updating only the personalized classifier, then a gating
//! pass over the gate subset updating only the gate, with both experts held
//! fixed during the gating pass. The shared extractor is never modified, so its
//! activations are computed once per client.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{split_per_gate, ClientSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{
    build_model, classifier_loss_and_grad, classify, extract_features, model_loss_and_grad,
    GateInput, GatingParams, ModelParams, ModelSpec, Predictor, SplitModel,
};
use crate::numerics::{mix_rows, SgdConfig, Tape, Tensor};
use crate::seed::derive_seed;
use crate::training::{train_minibatch, EpochTrainer};

const TAG_SPLIT: u64 = 0x7370_6c74;
const TAG_ADAPT: u64 = 0x6164_6170;
const TAG_GATE: u64 = 0x6761_7465;
const FEATURE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Local,
    PflFt,
    PflFb,
    PflMf,
    PflMfe,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Local,
        Algorithm::PflFt,
        Algorithm::PflFb,
        Algorithm::PflMf,
        Algorithm::PflMfe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Local => "local",
            Algorithm::PflFt => "pfl_ft",
            Algorithm::PflFb => "pfl_fb",
            Algorithm::PflMf => "pfl_mf",
            Algorithm::PflMfe => "pfl_mfe",
        }
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Algorithm::PflMf | Algorithm::PflMfe)
    }

    pub fn gate_input(self) -> Option<GateInput> {
        match self {
            Algorithm::PflMf => Some(GateInput::Raw),
            Algorithm::PflMfe => Some(GateInput::Feature),
            _ => None,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

/// Hyperparameters of the adaptation and gating stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    pub algorithm: Algorithm,
    /// Adaptation epochs `E`.
    pub epochs: usize,
    /// Adaptation learning rate.
    pub adapt_lr: f64,
    /// Gate learning rate.
    pub gate_lr: f64,
    pub batch_size: usize,
    /// Fraction of a client's data used for adaptation; the rest trains the gate.
    pub split_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl PersonalizationConfig {
    pub fn adapt_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.adapt_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
        }
    }

    pub fn gate_sgd(&self) -> SgdConfig {
        SgdConfig::plain(self.gate_lr)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.algorithm != Algorithm::Local && self.epochs == 0 {
            return Err(Error::config(format!("{path}.epochs must be >= 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size must be >= 1")));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(format!(
                "{path}.split_ratio must be in (0, 1), got {}",
                self.split_ratio
            )));
        }
        self.adapt_sgd().validate(&format!("{path}.adapt"))?;
        self.gate_sgd().validate(&format!("{path}.gate"))
    }
}

/// From-scratch training on one client's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

/// A client's personalized parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Personal {
    /// Whole model (Local, PFL-FT).
    Full(ModelParams),
    /// Classifier on top of the frozen global extractor (FB, MF, MFE).
    Classifier(Vec<Tensor>),
}

#[derive(Debug, Clone)]
pub struct PersonalizedClient {
    pub client_id: usize,
    pub algorithm: Algorithm,
    pub global: Arc<SplitModel>,
    pub personal: Personal,
    pub gate: Option<GatingParams>,
    /// Mean gate value over the gate subset after training.
    pub mean_gate: Option<f64>,
}

impl PersonalizedClient {
    pub fn spec(&self) -> &ModelSpec {
        &self.global.spec
    }

    pub fn classifier(&self) -> Option<&[Tensor]> {
        match &self.personal {
            Personal::Classifier(c) => Some(c),
            Personal::Full(_) => None,
        }
    }
}

impl Predictor for PersonalizedClient {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.personal, &self.gate) {
            (Personal::Full(m), _) => m.forward(x),
            (Personal::Classifier(c), None) => {
                classify(self.spec(), c, &self.global.extract_features(x)?)
            }
            (Personal::Classifier(_), Some(_)) => moe_predict(x, self),
        }
    }
}

/// Extractor activations for `indices`, computed in chunks.
pub fn features_for(global: &SplitModel, ds: &LabeledDataset, indices: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * global.feature_dim());
    for chunk in indices.chunks(FEATURE_BATCH) {
        let (x, _) = ds.batch(chunk)?;
        data.extend(global.extract_features(&x)?.into_data());
    }
    Tensor::new(vec![indices.len(), global.feature_dim()], data)
}

/// Flattened images `[n, C·side·side]`.
pub fn raw_inputs(ds: &LabeledDataset, indices: &[usize]) -> Result<Tensor> {
    let x = ds.features().select_rows(indices)?;
    let w = x.row_len();
    x.into_reshaped(&[indices.len(), w])
}

fn labels_of(ds: &LabeledDataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| ds.labels()[i]).collect()
}

/// Local baseline: a fresh model trained only on the client's data.
pub fn train_local_baseline(
    ds: &LabeledDataset,
    indices: &[usize],
    spec: &ModelSpec,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ModelParams> {
    if indices.is_empty() {
        return Err(Error::DegenerateClient("local training on an empty client".into()));
    }
    let mut model = build_model(spec, seed)?;
    train_minibatch(
        model.tensors_mut(),
        indices.len(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.sgd,
        derive_seed(seed, &[TAG_ADAPT]),
        |p, batch| {
            let picked: Vec<usize> = batch.iter().map(|&j| indices[j]).collect();
            let (x, y) = ds.batch(&picked)?;
            model_loss_and_grad(spec, p, &x, &y)
        },
    )?;
    Ok(model)
}

/// Fine-tunes every parameter of the global model at the adaptation rate.
/// Returns the adapted model and per-epoch losses.
pub fn pfl_ft(
    theta: &ModelParams,
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut model = theta.clone();
    let losses = train_minibatch(
        model.tensors_mut(),
        indices.len(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.adapt_sgd(),
        derive_seed(seed, &[TAG_ADAPT]),
        |p, batch| {
            let picked: Vec<usize> = batch.iter().map(|&j| indices[j]).collect();
            let (x, y) = ds.batch(&picked)?;
            model_loss_and_grad(theta.spec(), p, &x, &y)
        },
    )?;
    Ok((model, losses))
}

/// Classifier-only fine-tuning on precomputed activations.
pub struct ClassifierAdapter<'a> {
    spec: &'a ModelSpec,
    features: &'a Tensor,
    labels: &'a [usize],
    trainer: EpochTrainer,
}

impl<'a> ClassifierAdapter<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        classifier: &[Tensor],
        features: &'a Tensor,
        labels: &'a [usize],
        cfg: &PersonalizationConfig,
        seed: u64,
    ) -> Self {
        Self {
            spec,
            features,
            labels,
            trainer: EpochTrainer::new(classifier, cfg.batch_size, cfg.adapt_sgd(), seed),
        }
    }

    pub fn epoch(&mut self, classifier: &mut [Tensor]) -> Result<f64> {
        let (spec, features, labels) = (self.spec, self.features, self.labels);
        self.trainer.run_epoch(classifier, labels.len(), |p, batch| {
            let a = features.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&j| labels[j]).collect();
            classifier_loss_and_grad(spec, p, &a, &y)
        })
    }
}

/// Freeze-base personalization: the classifier starts from the global one and
/// is the only thing updated. Returns the personalized classifier and per-epoch losses.
pub fn pfl_fb(
    global: &SplitModel,
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let features = features_for(global, ds, indices)?;
    let labels = labels_of(ds, indices);
    let mut classifier = global.classifier.clone();
    let mut adapter = ClassifierAdapter::new(
        &global.spec,
        &classifier,
        &features,
        &labels,
        cfg,
        derive_seed(seed, &[TAG_ADAPT]),
    );
    let losses = (0..cfg.epochs)
        .map(|_| adapter.epoch(&mut classifier))
        .collect::<Result<Vec<_>>>()?;
    Ok((classifier, losses))
}

/// Everything the gate needs, with both experts' outputs already evaluated.
#[derive(Debug, Clone)]
pub struct GateData {
    /// `[n, D]` raw pixels or extractor activations.
    pub inputs: Tensor,
    /// `[n, K]`
    pub global_logits: Tensor,
    /// `[n, K]`
    pub local_logits: Tensor,
    pub labels: Vec<usize>,
}

impl GateData {
    pub fn new(inputs: Tensor, global_logits: Tensor, local_logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        global_logits.ensure_same_shape(&local_logits, "gate experts")?;
        if inputs.rows() != labels.len() || global_logits.rows() != labels.len() {
            return Err(Error::dim(format!(
                "gate data: {} inputs, {} expert rows, {} labels",
                inputs.rows(),
                global_logits.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::DegenerateClient("empty gate set".into()));
        }
        Ok(Self {
            inputs,
            global_logits,
            local_logits,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cross-entropy of the mixed logits on `rows` of `data` and its gradient
/// w.r.t. `[weights, bias]` of the gate.
pub fn gate_loss_and_grad(
    gate_params: &[Tensor],
    data: &GateData,
    rows: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let w = tape.leaf(gate_params[0].clone());
    let b = tape.leaf(gate_params[1].clone());
    let v = tape.leaf(data.inputs.select_rows(rows)?);
    let gl = tape.leaf(data.global_logits.select_rows(rows)?);
    let lo = tape.leaf(data.local_logits.select_rows(rows)?);
    let z = tape.dense(v, w, b)?;
    let g = tape.sigmoid(z);
    let mixed = tape.mix(g, gl, lo)?;
    let y: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
    let loss = tape.cross_entropy(mixed, &y)?;
    let grads = tape.backward(loss, &[w, b])?;
    Ok((tape.value(loss).item(), grads))
}

fn check_gate(gate: &GatingParams, data: &GateData) -> Result<()> {
    if data.inputs.ndim() != 2 || data.inputs.shape()[1] != gate.input_dim() {
        return Err(Error::dim(format!(
            "{:?} gate has {} inputs but gate data is {:?}",
            gate.input_mode,
            gate.input_dim(),
            data.inputs.shape()
        )));
    }
    Ok(())
}

/// Full-set gate loss.
pub fn gate_loss(gate: &GatingParams, data: &GateData) -> Result<f64> {
    check_gate(gate, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let params = [gate.weights.clone(), gate.bias.clone()];
    Ok(gate_loss_and_grad(&params, data, &all)?.0)
}

/// Stateful gate optimizer: one call per gating pass.
pub struct GateTrainer {
    trainer: EpochTrainer,
}

impl GateTrainer {
    pub fn new(gate: &GatingParams, cfg: &PersonalizationConfig, seed: u64) -> Self {
        let params = [gate.weights.clone(), gate.bias.clone()];
        Self {
            trainer: EpochTrainer::new(&params, cfg.batch_size, cfg.gate_sgd(), seed),
        }
    }

    pub fn epoch(&mut self, gate: &mut GatingParams, data: &GateData) -> Result<f64> {
        check_gate(gate, data)?;
        let mut params = [gate.weights.clone(), gate.bias.clone()];
        let loss = self
            .trainer
            .run_epoch(&mut params, data.len(), |p, rows| gate_loss_and_grad(p, data, rows))?;
        let [w, b] = params;
        gate.weights = w;
        gate.bias = b;
        Ok(loss)
    }
}

/// Zero-initialized gate trained for `cfg.epochs` passes over fixed experts.
/// Returns the gate and per-epoch losses.
pub fn train_gate(
    data: &GateData,
    cfg: &PersonalizationConfig,
    input_mode: GateInput,
    seed: u64,
) -> Result<(GatingParams, Vec<f64>)> {
    let mut gate = GatingParams::zeros(data.inputs.shape()[1], input_mode);
    let mut trainer = GateTrainer::new(&gate, cfg, seed);
    let losses = (0..cfg.epochs)
        .map(|_| trainer.epoch(&mut gate, data))
        .collect::<Result<Vec<_>>>()?;
    Ok((gate, losses))
}

/// Mixture-of-experts personalization. `input_mode` selects raw-image (MF) or
/// extractor-activation (MFE) gating.
pub fn run_pfl_moe(
    client_id: usize,
    ds: &LabeledDataset,
    indices: &[usize],
    global: Arc<SplitModel>,
    cfg: &PersonalizationConfig,
    input_mode: GateInput,
    seed: u64,
) -> Result<PersonalizedClient> {
    let split = split_per_gate(indices, cfg.split_ratio, derive_seed(seed, &[TAG_SPLIT]))?;
    run_pfl_moe_split(client_id, ds, &split, global, cfg, input_mode, seed)
}

/// As [`run_pfl_moe`] with an explicit adaptation/gate split.
pub fn run_pfl_moe_split(
    client_id: usize,
    ds: &LabeledDataset,
    split: &ClientSplit,
    global: Arc<SplitModel>,
    cfg: &PersonalizationConfig,
    input_mode: GateInput,
    seed: u64,
) -> Result<PersonalizedClient> {
    let spec = &global.spec;
    let per_features = features_for(&global, ds, &split.per_indices)?;
    let per_labels = labels_of(ds, &split.per_indices);
    let gate_features = features_for(&global, ds, &split.gate_indices)?;
    let gate_labels = labels_of(ds, &split.gate_indices);
    let gate_inputs = match input_mode {
        GateInput::Raw => raw_inputs(ds, &split.gate_indices)?,
        GateInput::Feature => gate_features.clone(),
    };
    let global_logits = global.classify(&gate_features)?;

    let mut classifier = global.classifier.clone();
    let mut gate = GatingParams::for_spec(spec, input_mode);
    let mut adapter = ClassifierAdapter::new(
        spec,
        &classifier,
        &per_features,
        &per_labels,
        cfg,
        derive_seed(seed, &[TAG_ADAPT]),
    );
    let mut gate_trainer = GateTrainer::new(&gate, cfg, derive_seed(seed, &[TAG_GATE]));
    let mut data = GateData::new(
        gate_inputs,
        global_logits.clone(),
        global_logits,
        gate_labels,
    )?;
    for _ in 0..cfg.epochs {
        adapter.epoch(&mut classifier)?;
        data.local_logits = classify(spec, &classifier, &gate_features)?;
        gate_trainer.epoch(&mut gate, &data)?;
    }
    let g = gate.forward_batch(&data.inputs)?;
    let mean_gate = g.sum() / g.len() as f64;
    Ok(PersonalizedClient {
        client_id,
        algorithm: match input_mode {
            GateInput::Raw => Algorithm::PflMf,
            GateInput::Feature => Algorithm::PflMfe,
        },
        global,
        personal: Personal::Classifier(classifier),
        gate: Some(gate),
        mean_gate: Some(mean_gate),
    })
}

pub fn run_pfl_mf(
    client_id: usize,
    ds: &LabeledDataset,
    indices: &[usize],
    global: Arc<SplitModel>,
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<PersonalizedClient> {
    run_pfl_moe(client_id, ds, indices, global, cfg, GateInput::Raw, seed)
}

pub fn run_pfl_mfe(
    client_id: usize,
    ds: &LabeledDataset,
    indices: &[usize],
    global: Arc<SplitModel>,
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<PersonalizedClient> {
    run_pfl_moe(client_id, ds, indices, global, cfg, GateInput::Feature, seed)
}

/// Single-pass MoE inference: shared activations, both classifier heads, gate,
/// logit mix.
pub fn moe_predict(x: &Tensor, client: &PersonalizedClient) -> Result<Tensor> {
    let gate = client
        .gate
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("client {} has no gate", client.client_id)))?;
    let classifier = client
        .classifier()
        .ok_or_else(|| Error::Usage("MoE prediction needs a personalized classifier".into()))?;
    let spec = client.spec();
    let a = extract_features(spec, &client.global.extractor, x)?;
    let global_out = classify(spec, &client.global.classifier, &a)?;
    let local_out = classify(spec, classifier, &a)?;
    let v = match gate.input_mode {
        GateInput::Raw => {
            let w = x.row_len();
            x.reshape(&[x.rows(), w])?
        }
        GateInput::Feature => a,
    };
    let g = gate.forward_batch(&v)?;
    mix_rows(&g, &global_out, &local_out)
}

/// Runs `algorithm` for one client. `global` is the federated model; the Local
/// baseline ignores it apart from its model spec.
#[allow(clippy::too_many_arguments)]
pub fn personalize_client(
    algorithm: Algorithm,
    client_id: usize,
    ds: &LabeledDataset,
    indices: &[usize],
    global: Arc<SplitModel>,
    cfg: &PersonalizationConfig,
    local_cfg: &LocalConfig,
    seed: u64,
) -> Result<PersonalizedClient> {
    let seed = derive_seed(seed, &[client_id as u64]);
    let (personal, gate, mean_gate) = match algorithm {
        Algorithm::Local => {
            let m = train_local_baseline(ds, indices, &global.spec, local_cfg, seed)?;
            (Personal::Full(m), None, None)
        }
        Algorithm::PflFt => {
            let (m, _) = pfl_ft(&global.merge()?, ds, indices, cfg, seed)?;
            (Personal::Full(m), None, None)
        }
        Algorithm::PflFb => {
            let (c, _) = pfl_fb(&global, ds, indices, cfg, seed)?;
            (Personal::Classifier(c), None, None)
        }
        Algorithm::PflMf | Algorithm::PflMfe => {
            let mode = algorithm.gate_input().expect("gated algorithm");
            return run_pfl_moe(client_id, ds, indices, global, cfg, mode, seed);
        }
    };
    Ok(PersonalizedClient {
        client_id,
        algorithm,
        global,
        personal,
        gate,
        mean_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedprox".parse::<Algorithm>().is_err());
        assert!(Algorithm::PflMfe.uses_gate() && !Algorithm::PflFb.uses_gate());
    }

    #[test]
    fn zero_gate_data_dims_checked() {
        let data = GateData::new(
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2, 4]),
            Tensor::zeros(&[2, 4]),
            vec![0, 1],
        )
        .unwrap();
        let gate = GatingParams::zeros(5, GateInput::Raw);
        assert!(matches!(gate_loss(&gate, &data), Err(Error::Dimension(_))));
    }
}
