//! Feed-forward network core: parameters, losses, gradients, optimizer.

mod backward;
mod checkpoint;
mod loss;
mod matrix;
mod optim;
mod params;

pub use backward::{backward, loss_value, Gradients, LossSpec, LossTerms};
pub use checkpoint::CHECKPOINT_FORMAT_VERSION;
pub use loss::{
    argmax, cross_entropy, entropy, kl_div, mean_cross_entropy, mean_kl_div, softmax, softmax_t,
    softmax_t_rows, ProbVector,
};
pub(crate) use loss::softmax_t_into;
pub use matrix::Matrix;
pub use optim::{sgd_step, OptState};
pub use params::{Activation, Layer, ModelParams};
