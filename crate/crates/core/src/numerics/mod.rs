//! Tensor arithmetic, layer kernels with analytic gradients, losses and SGD.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use layers::{
    activation, conv2d_forward, dense_forward, max_pool2x2, relu, sigmoid, sigmoid_scalar,
    softmax, Activation,
};
pub use loss::{cross_entropy_loss, cross_entropy_with_grad};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use tape::{mix_rows, Tape, Var};
pub use tensor::{argmax, Tensor};
