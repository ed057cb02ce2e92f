//! A small dense-tensor toolkit: exactly the layers the t-patch network
//! needs, each with a hand-derived backward pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor, OptimizerState};
pub use gradcheck::{grad_check, grad_check_input, GradCheckReport};
pub use layers::{
    BatchNorm, DepthwiseTemporalConv, Dropout, Layer, Linear, MaxPool, Mode, Param, Relu, SharedMlp,
    TemporalConv,
};
pub use loss::{cross_entropy, loss_total, majority_label, softmax, TotalLoss};
pub use optim::{Adam, AdamConfig};
pub use tensor::{matmul, Scalar, Tensor};
