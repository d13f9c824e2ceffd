//! Mixture-of-Layers: routed layer skipping for transformer stacks, with
//! cognition-token self-distillation and a synthetic training harness.

pub mod action;
pub mod cogkd;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mole;
pub mod params;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Gradients, Tensor};
