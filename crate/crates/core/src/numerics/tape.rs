//! Reverse-mode gradient accumulation over the fixed layer set.
//!
//! A [`Tape`] records the forward pass of one batch. [`Tape::backward`] then
//! walks the record in reverse and returns gradients of a scalar output with
//! respect to the requested leaves. Only nodes on a path between a requested
//! leaf and the output are differentiated.

use crate::error::{Error, Result};
use crate::numerics::layers;
use crate::numerics::loss::cross_entropy_with_grad;
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { input: Var, weights: Var, bias: Var },
    Conv2d { input: Var, kernels: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Mul(Var, Var),
    Sum(Var),
    Mix { gate: Var, global: Var, local: Var },
    CrossEntropy { logits: Var, grad: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Dense { input, weights, bias } => vec![*input, *weights, *bias],
            Op::Conv2d { input, kernels, bias } => vec![*input, *kernels, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
            Op::MaxPool { input, .. } => vec![*input],
            Op::Mul(a, b) => vec![*a, *b],
            Op::Mix { gate, global, local } => vec![*gate, *global, *local],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = layers::dense_forward(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weights, bias }))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let out = layers::conv2d_forward(self.value(input), self.value(kernels), self.value(bias))?;
        Ok(self.push(out, Op::Conv2d { input, kernels, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = layers::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = layers::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = layers::max_pool2x2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { input: x, argmax }))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        let out = v.reshape(&shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.ensure_same_shape(tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Per-row convex mix `g·global + (1−g)·local`; `gate` is `[B, 1]`.
    pub fn mix(&mut self, gate: Var, global: Var, local: Var) -> Result<Var> {
        let out = mix_rows(self.value(gate), self.value(global), self.value(local))?;
        Ok(self.push(out, Op::Mix { gate, global, local }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = cross_entropy_with_grad(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }))
    }

    /// Gradients of the scalar `output` w.r.t. each of `wrt`, in order.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        // ancestors of the output
        let mut upstream = vec![false; n];
        upstream[output.0] = true;
        for i in (0..n).rev() {
            if upstream[i] {
                for input in self.nodes[i].op.inputs() {
                    upstream[input.0] = true;
                }
            }
        }
        // descendants of a requested var
        let mut downstream = vec![false; n];
        for v in wrt {
            if v.0 >= n || !upstream[v.0] {
                return Err(Error::Usage(format!(
                    "gradient requested for {v:?}, which is not on the recorded path to the output"
                )));
            }
            downstream[v.0] = true;
        }
        for i in 0..n {
            if !downstream[i] && self.nodes[i].op.inputs().iter().any(|v| downstream[v.0]) {
                downstream[i] = true;
            }
        }
        let live = |v: Var| upstream[v.0] && downstream[v.0];

        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..n).rev() {
            if !live(Var(i)) || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contrib) in self.node_backward(i, &g, &live)? {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect())
    }

    fn node_backward(
        &self,
        i: usize,
        g: &Tensor,
        live: &dyn Fn(Var) -> bool,
    ) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Dense { input, weights, bias } => {
                let (gi, gw, gb) =
                    layers::dense_backward(self.value(*input), self.value(*weights), g, live(*input))?;
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                if live(*weights) {
                    out.push((*weights, gw));
                }
                if live(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::Conv2d { input, kernels, bias } => {
                let (gi, gk, gb) = layers::conv2d_backward(
                    self.value(*input),
                    self.value(*kernels),
                    self.value(*bias),
                    g,
                    live(*input),
                )?;
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                if live(*kernels) {
                    out.push((*kernels, gk));
                }
                if live(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::Relu(x) => out.push((*x, layers::relu_backward(self.value(*x), g))),
            Op::Sigmoid(x) => {
                out.push((*x, layers::sigmoid_backward(&self.nodes[i].value, g)))
            }
            Op::MaxPool { input, argmax } => out.push((
                *input,
                layers::max_pool2x2_backward(self.value(*input), argmax, g),
            )),
            Op::Reshape(x) => out.push((*x, g.reshape(self.value(*x).shape())?)),
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                if live(*a) {
                    out.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if live(*b) {
                    out.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), g.item()))),
            Op::Mix { gate, global, local } => {
                let (gt, gl, lo) = (self.value(*gate), self.value(*global), self.value(*local));
                let k = gl.row_len();
                let mut d_gate = vec![0.0; gt.len()];
                let mut d_global = vec![0.0; gl.len()];
                let mut d_local = vec![0.0; lo.len()];
                for (b, (dg, &w)) in d_gate.iter_mut().zip(gt.data()).enumerate() {
                    for c in 0..k {
                        let idx = b * k + c;
                        let up = g.data()[idx];
                        *dg += up * (gl.data()[idx] - lo.data()[idx]);
                        d_global[idx] = w * up;
                        d_local[idx] = (1.0 - w) * up;
                    }
                }
                if live(*gate) {
                    out.push((*gate, Tensor::new(gt.shape().to_vec(), d_gate)?));
                }
                if live(*global) {
                    out.push((*global, Tensor::new(gl.shape().to_vec(), d_global)?));
                }
                if live(*local) {
                    out.push((*local, Tensor::new(lo.shape().to_vec(), d_local)?));
                }
            }
            Op::CrossEntropy { logits, grad } => {
                let scale = g.item();
                out.push((*logits, grad.map(|v| v * scale)));
            }
        }
        Ok(out)
    }
}

/// `out[b,k] = g[b]·global[b,k] + (1−g[b])·local[b,k]`.
pub fn mix_rows(gate: &Tensor, global: &Tensor, local: &Tensor) -> Result<Tensor> {
    global.ensure_same_shape(local, "mix")?;
    if gate.len() != global.rows() {
        return Err(Error::dim(format!(
            "mix: gate {:?} does not match expert outputs {:?}",
            gate.shape(),
            global.shape()
        )));
    }
    let k = global.row_len();
    let mut out = Vec::with_capacity(global.len());
    for (b, &g) in gate.data().iter().enumerate() {
        for (&yg, &yl) in global.row(b).iter().zip(local.row(b)) {
            out.push(g * yg + (1.0 - g) * yl);
        }
    }
    debug_assert_eq!(out.len(), global.rows() * k);
    Tensor::new(global.shape().to_vec(), out)
}
