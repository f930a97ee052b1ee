//! Deterministic numeric kernel: tensors, small MLPs with analytic
//! gradients, AdamW, a seeded counter-based generator and a
//! finite-difference oracle.

mod finite_diff;
mod mlp;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use finite_diff::{finite_diff, max_relative_error};
pub use mlp::{Activation, ForwardTrace, Layer, LayerGrad, MlpGrads, MlpNetwork};
pub use optim::OptimState;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
