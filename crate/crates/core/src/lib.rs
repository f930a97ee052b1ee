//! Reward-guided score distillation on a desk-scale testbed.
//!
//! The crate is organised bottom-up: [`numcore`] supplies tensors, MLPs and
//! optimisers; [`diffusion`] provides a variance-preserving schedule and a
//! closed-form noise predictor for Gaussian-mixture priors; [`scene`] is a
//! linear multi-view renderer; [`preference`] simulates annotation;
//! [`reward`] trains a pairwise preference scorer; [`distill`] runs SDS and
//! its reward-corrected variant; [`eval`] holds the ranking metrics.
//!
//! Numeric types are generic over [`numcore::Scalar`]; the aliases below fix
//! the element type for the common cases.

pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod preference;
pub mod reward;
pub mod scene;
pub mod suite;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Tensor64 = numcore::Tensor<f64>;
pub type Tensor32 = numcore::Tensor<f32>;
pub type Mlp64 = numcore::MlpNetwork<f64>;
pub type Mlp32 = numcore::MlpNetwork<f32>;
