//! Dense tensors, reverse-mode autodiff, Adam and seeded randomness.

pub mod adam;
pub mod container;
mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{Bound, ParamSet};
pub use rng::{derive_seed, random_normal, Rng};
pub use tape::{concat, Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor};

/// Layer-norm stabilizer used throughout the models.
pub const LN_EPS: f64 = 1e-5;
