//! Ensemble subseasonal forecasting in a quantized latent space, with
//! optimal-transport coupling between atmosphere and boundary spheres.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod attribution;
pub mod coupling;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod harness;
pub mod rollout;
pub mod stats;
pub mod verify;
pub mod vq;

pub use error::{Result, S2skError};
