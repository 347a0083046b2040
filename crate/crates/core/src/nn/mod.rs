//! Dense network engine: shapes, forward passes, densities and reverse-mode gradients.

mod arch;
mod density;
mod matrix;
mod mlp;
pub mod tape;

pub use arch::{
    activation_apply, flatten, unflatten, Activation, Architecture, LayerMatrices, LayerShape,
    WeightVector,
};
pub use density::{
    gaussian_log_density, log_joint, log_lik_tape, pointwise_log_lik, ObservationModel,
};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, mlp_forward_batch, mlp_forward_tape};
pub use tape::{gradient, Gradients, GradientRequest, Tape, Var};
