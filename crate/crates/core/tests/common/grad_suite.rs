//! Finite-difference checks for every differentiable path: each tape op, the
//! full models, the classifier head and the gate/mixing path in both input
//! modes.

use fedmoe::models::{
    build_model, classifier_loss_and_grad, model_loss_and_grad, GateInput, ModelSpec,
};
use fedmoe::numerics::{self, Tape, Tensor, Var};
use fedmoe::personalization::{gate_loss_and_grad, GateData};
use fedmoe::Result;
use rand::Rng;

use super::{check_gradients, random_labels, random_tensor, rng, GradCheck};

pub const STEP: f64 = 1e-5;

/// Loss `Σ out ⊙ r` recorded on a tape for a unary-with-params op.
fn weighted_sum(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Builds the op on a tape from `inputs`, then checks gradients w.r.t. every
/// input against an independent forward function.
fn check_op<B, F>(inputs: Vec<Tensor>, r: &Tensor, seed: u64, build: B, forward: F) -> Result<GradCheck>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, r)?;
    let grads = tape.backward(loss, &vars)?;
    let mut params = inputs;
    check_gradients(&mut params, &grads, None, STEP, &mut rng(seed), |p| Ok(dot(&forward(p)?, r)))
}

pub fn dense() -> Result<GradCheck> {
    let mut g = rng(1);
    let ins = vec![random_tensor(&[3, 5], &mut g), random_tensor(&[5, 4], &mut g), random_tensor(&[4], &mut g)];
    let r = random_tensor(&[3, 4], &mut g);
    check_op(ins, &r, 1, |t, v| t.dense(v[0], v[1], v[2]), |p| numerics::dense_forward(&p[0], &p[1], &p[2]))
}

pub fn conv() -> Result<GradCheck> {
    let mut g = rng(2);
    let ins = vec![
        random_tensor(&[2, 2, 7, 7], &mut g),
        random_tensor(&[3, 2, 3, 3], &mut g),
        random_tensor(&[3], &mut g),
    ];
    let r = random_tensor(&[2, 3, 5, 5], &mut g);
    check_op(ins, &r, 2, |t, v| t.conv2d(v[0], v[1], v[2]), |p| numerics::conv2d_forward(&p[0], &p[1], &p[2]))
}

pub fn relu() -> Result<GradCheck> {
    let mut g = rng(3);
    let ins = vec![random_tensor(&[4, 6], &mut g)];
    let r = random_tensor(&[4, 6], &mut g);
    check_op(ins, &r, 3, |t, v| Ok(t.relu(v[0])), |p| Ok(numerics::relu(&p[0])))
}

pub fn sigmoid() -> Result<GradCheck> {
    let mut g = rng(4);
    let ins = vec![random_tensor(&[4, 6], &mut g).map(|v| 4.0 * v)];
    let r = random_tensor(&[4, 6], &mut g);
    check_op(ins, &r, 4, |t, v| Ok(t.sigmoid(v[0])), |p| Ok(numerics::sigmoid(&p[0])))
}

pub fn max_pool() -> Result<GradCheck> {
    let mut g = rng(5);
    let ins = vec![random_tensor(&[2, 3, 6, 6], &mut g)];
    let r = random_tensor(&[2, 3, 3, 3], &mut g);
    check_op(ins, &r, 5, |t, v| t.max_pool2x2(v[0]), |p| Ok(numerics::max_pool2x2(&p[0])?.0))
}

pub fn flatten() -> Result<GradCheck> {
    let mut g = rng(6);
    let ins = vec![random_tensor(&[2, 3, 4, 4], &mut g)];
    let r = random_tensor(&[2, 48], &mut g);
    check_op(ins, &r, 6, |t, v| t.flatten(v[0]), |p| p[0].reshape(&[2, 48]))
}

pub fn mix() -> Result<GradCheck> {
    let mut g = rng(7);
    let gate = random_tensor(&[4, 1], &mut g).map(|v| 0.5 + 0.4 * v);
    let ins = vec![gate, random_tensor(&[4, 5], &mut g), random_tensor(&[4, 5], &mut g)];
    let r = random_tensor(&[4, 5], &mut g);
    check_op(ins, &r, 7, |t, v| t.mix(v[0], v[1], v[2]), |p| numerics::mix_rows(&p[0], &p[1], &p[2]))
}

pub fn cross_entropy() -> Result<GradCheck> {
    let mut g = rng(8);
    let logits = random_tensor(&[5, 7], &mut g).map(|v| 3.0 * v);
    let labels = random_labels(5, 7, &mut g);
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(lv, &labels)?;
    let grads = tape.backward(loss, &[lv])?;
    let mut params = vec![logits];
    check_gradients(&mut params, &grads, None, STEP, &mut g, |p| {
        numerics::cross_entropy_loss(&p[0], &labels)
    })
}

fn full_model(spec: &ModelSpec, seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let mut g = rng(seed);
    let model = build_model(spec, seed)?;
    let x = random_tensor(&[3, spec.channels, 32, 32], &mut g).map(|v| 0.5 + 0.5 * v);
    let y = random_labels(3, spec.classes, &mut g);
    let (_, grads) = model_loss_and_grad(spec, model.tensors(), &x, &y)?;
    let mut params = model.into_tensors();
    check_gradients(&mut params, &grads, Some(per_tensor), STEP, &mut g, |p| {
        Ok(model_loss_and_grad(spec, p, &x, &y)?.0)
    })
}

pub fn lenet5() -> Result<GradCheck> {
    full_model(&ModelSpec::lenet5(1, 10), 9, 12)
}

pub fn lenet5_rgb() -> Result<GradCheck> {
    full_model(&ModelSpec::lenet5(3, 10), 10, 6)
}

pub fn mlp() -> Result<GradCheck> {
    full_model(&ModelSpec::mlp(1, vec![16, 8], 10), 11, 24)
}

pub fn classifier_head() -> Result<GradCheck> {
    let mut g = rng(12);
    let spec = ModelSpec::lenet5(1, 10);
    let split = build_model(&spec, 12)?.split();
    let a = random_tensor(&[4, 400], &mut g).map(|v| v.abs());
    let y = random_labels(4, 10, &mut g);
    let (_, grads) = classifier_loss_and_grad(&spec, &split.classifier, &a, &y)?;
    let mut params = split.classifier.clone();
    check_gradients(&mut params, &grads, Some(40), STEP, &mut g, |p| {
        Ok(classifier_loss_and_grad(&spec, p, &a, &y)?.0)
    })
}

/// Gate gradient through sigmoid, logit mixing and cross-entropy, with both
/// experts fixed.
pub fn gate(mode: GateInput) -> Result<GradCheck> {
    let mut g = rng(13 + mode as u64);
    let spec = ModelSpec::lenet5(1, 10);
    let n = 6;
    let inputs = match mode {
        GateInput::Raw => random_tensor(&[n, 1024], &mut g).map(|v| 0.5 + 0.5 * v),
        GateInput::Feature => {
            let model = build_model(&spec, 14)?.split();
            let x = random_tensor(&[n, 1, 32, 32], &mut g).map(|v| 0.5 + 0.5 * v);
            model.extract_features(&x)?
        }
    };
    let data = GateData::new(
        inputs,
        random_tensor(&[n, 10], &mut g).map(|v| 3.0 * v),
        random_tensor(&[n, 10], &mut g).map(|v| 3.0 * v),
        random_labels(n, 10, &mut g),
    )?;
    let d = data.inputs.shape()[1];
    let w = random_tensor(&[d, 1], &mut g).map(|v| 0.05 * v);
    let b = Tensor::vector(vec![g.random_range(-0.5..0.5)]);
    let rows: Vec<usize> = (0..n).collect();
    let mut params = vec![w, b];
    let (_, grads) = gate_loss_and_grad(&params, &data, &rows)?;
    check_gradients(&mut params, &grads, None, STEP, &mut g, |p| {
        Ok(gate_loss_and_grad(p, &data, &rows)?.0)
    })
}

/// Every check, by name.
pub fn all() -> Result<Vec<(&'static str, GradCheck)>> {
    Ok(vec![
        ("dense", dense()?),
        ("conv2d", conv()?),
        ("relu", relu()?),
        ("sigmoid", sigmoid()?),
        ("max_pool2x2", max_pool()?),
        ("flatten", flatten()?),
        ("mix", mix()?),
        ("cross_entropy", cross_entropy()?),
        ("lenet5 (1 channel)", lenet5()?),
        ("lenet5 (3 channels)", lenet5_rgb()?),
        ("mlp", mlp()?),
        ("classifier head", classifier_head()?),
        ("gate raw input", gate(GateInput::Raw)?),
        ("gate feature input", gate(GateInput::Feature)?),
    ])
}
