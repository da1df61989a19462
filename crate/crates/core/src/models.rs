//! Model zoo split into a feature extractor and a classifier, plus the
//! per-client linear gate that mixes two experts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lenet5,
    Mlp,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Self::Lenet5),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::config(format!("unsupported architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    /// Hidden layer widths, MLP only.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn lenet5(channels: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Lenet5,
            channels,
            side: 32,
            classes,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(channels: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            channels,
            side: 32,
            classes,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.side == 0 || self.classes < 2 {
            return Err(Error::config(format!(
                "model needs channels >= 1, side >= 1, classes >= 2; got {self:?}"
            )));
        }
        match self.arch {
            Architecture::Lenet5 => {
                let s1 = self.side.checked_sub(4).filter(|s| *s > 0 && s % 2 == 0);
                let s2 = s1.and_then(|s| (s / 2).checked_sub(4)).filter(|s| *s > 0 && s % 2 == 0);
                if s2.is_none() {
                    return Err(Error::config(format!(
                        "lenet5 cannot take {}x{} inputs",
                        self.side, self.side
                    )));
                }
                if !self.hidden.is_empty() {
                    return Err(Error::config("lenet5 has fixed hidden sizes"));
                }
            }
            Architecture::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(Error::config("mlp hidden widths must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Layers of the feature extractor, followed by those of the classifier.
    pub fn layers(&self) -> (Vec<Layer>, Vec<Layer>) {
        match self.arch {
            Architecture::Lenet5 => {
                let s = ((self.side - 4) / 2 - 4) / 2;
                let extractor = vec![
                    Layer::Conv { name: "conv1".into(), in_ch: self.channels, out_ch: 6, k: 5 },
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Conv { name: "conv2".into(), in_ch: 6, out_ch: 16, k: 5 },
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Flatten,
                ];
                let classifier = vec![
                    Layer::Dense { name: "fc1".into(), fan_in: 16 * s * s, fan_out: 120 },
                    Layer::Relu,
                    Layer::Dense { name: "fc2".into(), fan_in: 120, fan_out: 84 },
                    Layer::Relu,
                    Layer::Dense { name: "fc3".into(), fan_in: 84, fan_out: self.classes },
                ];
                (extractor, classifier)
            }
            Architecture::Mlp => {
                let mut extractor = vec![Layer::Flatten];
                let mut width = self.input_dim();
                for (i, &h) in self.hidden.iter().enumerate() {
                    extractor.push(Layer::Dense {
                        name: format!("hidden{}", i + 1),
                        fan_in: width,
                        fan_out: h,
                    });
                    extractor.push(Layer::Relu);
                    width = h;
                }
                let classifier = vec![Layer::Dense {
                    name: "out".into(),
                    fan_in: width,
                    fan_out: self.classes,
                }];
                (extractor, classifier)
            }
        }
    }

    /// Width of the activations passed from extractor to classifier.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Architecture::Lenet5 => {
                let s = ((self.side - 4) / 2 - 4) / 2;
                16 * s * s
            }
            Architecture::Mlp => self.hidden.last().copied().unwrap_or_else(|| self.input_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        let (e, c) = self.layers();
        e.iter().chain(&c).map(Layer::param_count).sum()
    }

    pub fn id(&self) -> String {
        match self.arch {
            Architecture::Lenet5 => format!("lenet5-c{}-s{}-k{}", self.channels, self.side, self.classes),
            Architecture::Mlp => {
                let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
                format!(
                    "mlp-c{}-s{}-h{}-k{}",
                    self.channels,
                    self.side,
                    hidden.join("x"),
                    self.classes
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, in_ch: usize, out_ch: usize, k: usize },
    Dense { name: String, fan_in: usize, fan_out: usize },
    Relu,
    MaxPool,
    Flatten,
}

impl Layer {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Conv { name, in_ch, out_ch, k } => vec![
                (format!("{name}.weight"), vec![*out_ch, *in_ch, *k, *k]),
                (format!("{name}.bias"), vec![*out_ch]),
            ],
            Layer::Dense { name, fan_in, fan_out } => vec![
                (format!("{name}.weight"), vec![*fan_in, *fan_out]),
                (format!("{name}.bias"), vec![*fan_out]),
            ],
            _ => vec![],
        }
    }

    fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv { in_ch, k, .. } => in_ch * k * k,
            Layer::Dense { fan_in, .. } => *fan_in,
            _ => 0,
        }
    }
}

fn stack_param_shapes(layers: &[Layer]) -> Vec<(String, Vec<usize>)> {
    layers.iter().flat_map(Layer::param_shapes).collect()
}

fn check_params(layers: &[Layer], params: &[Tensor], what: &str) -> Result<()> {
    let shapes = stack_param_shapes(layers);
    if shapes.len() != params.len()
        || shapes.iter().zip(params).any(|((_, s), p)| s.as_slice() != p.shape())
    {
        return Err(Error::dim(format!(
            "{what}: parameters {:?} do not match expected {:?}",
            params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
            shapes.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Applies a layer stack without recording.
pub fn run_stack(layers: &[Layer], params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    check_params(layers, params, "run_stack")?;
    let mut p = params.iter();
    let mut cur = x.clone();
    for layer in layers {
        cur = match layer {
            Layer::Conv { .. } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                numerics::conv2d_forward(&cur, w, b)?
            }
            Layer::Dense { .. } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                numerics::dense_forward(&cur, w, b)?
            }
            Layer::Relu => numerics::relu(&cur),
            Layer::MaxPool => numerics::max_pool2x2(&cur)?.0,
            Layer::Flatten => {
                let shape = [cur.rows(), cur.row_len()];
                cur.into_reshaped(&shape)?
            }
        };
    }
    Ok(cur)
}

/// Records a layer stack on `tape`; `params` are tape leaves in stack order.
pub fn record_stack(tape: &mut Tape, layers: &[Layer], params: &[Var], x: Var) -> Result<Var> {
    let mut p = params.iter().copied();
    let mut cur = x;
    for layer in layers {
        cur = match layer {
            Layer::Conv { .. } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                tape.conv2d(cur, w, b)?
            }
            Layer::Dense { .. } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                tape.dense(cur, w, b)?
            }
            Layer::Relu => tape.relu(cur),
            Layer::MaxPool => tape.max_pool2x2(cur)?,
            Layer::Flatten => tape.flatten(cur)?,
        };
    }
    Ok(cur)
}

/// Full model parameters in extractor-then-classifier order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Wraps tensors after checking them against the model spec.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let (e, c) = spec.layers();
        let all: Vec<Layer> = e.into_iter().chain(c).collect();
        check_params(&all, &tensors, "model params")?;
        let names = stack_param_shapes(&all).into_iter().map(|(n, _)| n).collect();
        Ok(Self { spec, names, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn extractor_len(&self) -> usize {
        stack_param_shapes(&self.spec.layers().0).len()
    }

    pub fn split(&self) -> SplitModel {
        let k = self.extractor_len();
        SplitModel {
            spec: self.spec.clone(),
            extractor: self.tensors[..k].to_vec(),
            classifier: self.tensors[k..].to_vec(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        let k = self.extractor_len();
        let (e, c) = self.spec.layers();
        let a = run_stack(&e, &self.tensors[..k], x)?;
        run_stack(&c, &self.tensors[k..], &a)
    }

    /// Mean cross-entropy on `(x, labels)` and its gradient for every tensor.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        model_loss_and_grad(&self.spec, &self.tensors, x, labels)
    }
}

/// Mean cross-entropy of the full model given as raw tensors, with gradients.
pub fn model_loss_and_grad(
    spec: &ModelSpec,
    params: &[Tensor],
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    check_input(spec, x)?;
    let (e, c) = spec.layers();
    let layers: Vec<Layer> = e.into_iter().chain(c).collect();
    stack_loss_and_grad(&layers, params, x, labels)
}

/// Shared tape routine: leaves for params and input, record, cross-entropy,
/// backward over the params.
pub fn stack_loss_and_grad(
    layers: &[Layer],
    params: &[Tensor],
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    check_params(layers, params, "loss_and_grad")?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.leaf(x.clone());
    let logits = record_stack(&mut tape, layers, &vars, xv)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss, &vars)?;
    Ok((tape.value(loss).item(), grads))
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    let expected = [spec.channels, spec.side, spec.side];
    if x.ndim() != 4 || x.shape()[1..] != expected {
        return Err(Error::dim(format!(
            "model {} expects input [B, {}, {}, {}], got {:?}",
            spec.id(),
            spec.channels,
            spec.side,
            spec.side,
            x.shape()
        )));
    }
    Ok(())
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, c) = spec.layers();
    let mut tensors = Vec::new();
    for layer in e.iter().chain(&c) {
        let shapes = layer.param_shapes();
        if shapes.is_empty() {
            continue;
        }
        let bound = 1.0 / (layer.fan_in() as f64).sqrt();
        let wshape = &shapes[0].1;
        let n: usize = wshape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        tensors.push(Tensor::new(wshape.clone(), data)?);
        tensors.push(Tensor::zeros(&shapes[1].1));
    }
    ModelParams::from_tensors(spec.clone(), tensors)
}

/// Model parameters split into the feature extractor and the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub spec: ModelSpec,
    pub extractor: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
}

impl SplitModel {
    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn merge(&self) -> Result<ModelParams> {
        let tensors = self.extractor.iter().chain(&self.classifier).cloned().collect();
        ModelParams::from_tensors(self.spec.clone(), tensors)
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        extract_features(&self.spec, &self.extractor, x)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        classify(&self.spec, &self.classifier, features)
    }
}

/// Extractor activations, shape `[B, feature_dim]`.
pub fn extract_features(spec: &ModelSpec, extractor: &[Tensor], x: &Tensor) -> Result<Tensor> {
    check_input(spec, x)?;
    run_stack(&spec.layers().0, extractor, x)
}

/// Classifier head output on extractor activations, as raw logits.
pub fn classify(spec: &ModelSpec, classifier: &[Tensor], features: &Tensor) -> Result<Tensor> {
    if features.ndim() != 2 || features.shape()[1] != spec.feature_dim() {
        return Err(Error::dim(format!(
            "classifier expects features [B, {}], got {:?}",
            spec.feature_dim(),
            features.shape()
        )));
    }
    run_stack(&spec.layers().1, classifier, features)
}

/// Cross-entropy gradient w.r.t. classifier parameters only, on fixed features.
pub fn classifier_loss_and_grad(
    spec: &ModelSpec,
    classifier: &[Tensor],
    features: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    stack_loss_and_grad(&spec.layers().1, classifier, features, labels)
}

/// Which signal the gate sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateInput {
    /// Flattened image, `C·side·side` wide.
    Raw,
    /// Extractor activations, `feature_dim` wide.
    Feature,
}

impl GateInput {
    pub fn dim(self, spec: &ModelSpec) -> usize {
        match self {
            GateInput::Raw => spec.input_dim(),
            GateInput::Feature => spec.feature_dim(),
        }
    }
}

/// Linear gate `g = sigmoid(wᵀv + b)` emitting the global expert's weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// `[input_dim, 1]`
    pub weights: Tensor,
    /// `[1]`
    pub bias: Tensor,
    pub input_mode: GateInput,
}

impl GatingParams {
    pub fn zeros(input_dim: usize, input_mode: GateInput) -> Self {
        Self {
            weights: Tensor::zeros(&[input_dim, 1]),
            bias: Tensor::zeros(&[1]),
            input_mode,
        }
    }

    pub fn for_spec(spec: &ModelSpec, input_mode: GateInput) -> Self {
        Self::zeros(input_mode.dim(spec), input_mode)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Gate values for a batch of inputs `[B, D]`, returned as `[B, 1]`.
    pub fn forward_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        if inputs.ndim() != 2 || inputs.shape()[1] != self.input_dim() {
            return Err(Error::dim(format!(
                "gate expects inputs [B, {}], got {:?}",
                self.input_dim(),
                inputs.shape()
            )));
        }
        Ok(numerics::sigmoid(&numerics::dense_forward(inputs, &self.weights, &self.bias)?))
    }
}

/// Scalar gate value for one input vector.
pub fn gate_forward(gate: &GatingParams, input: &Tensor) -> Result<f64> {
    if input.len() != gate.input_dim() {
        return Err(Error::dim(format!(
            "gate expects {} inputs, got {:?}",
            gate.input_dim(),
            input.shape()
        )));
    }
    let z: f64 = gate
        .weights
        .data()
        .iter()
        .zip(input.data())
        .map(|(w, v)| w * v)
        .sum::<f64>()
        + gate.bias.item();
    Ok(numerics::sigmoid_scalar(z))
}

/// `ỹ = g·global + (1−g)·local`, elementwise on logits.
pub fn mix_outputs(g: f64, global: &Tensor, local: &Tensor) -> Result<Tensor> {
    if global.len() != local.len() {
        return Err(Error::dim(format!(
            "mix: expert outputs {:?} and {:?} differ in length",
            global.shape(),
            local.shape()
        )));
    }
    let data = global
        .data()
        .iter()
        .zip(local.data())
        .map(|(&a, &b)| g * a + (1.0 - g) * b)
        .collect();
    Tensor::new(global.shape().to_vec(), data)
}

/// Anything that maps a batch of images to logits.
pub trait Predictor: Sync {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for ModelParams {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl Predictor for SplitModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(&self.extract_features(x)?)
    }
}
