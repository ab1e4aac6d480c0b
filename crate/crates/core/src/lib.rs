//! Toy diffusion models with closed-form Gaussian laws, controlled samplers,
//! analytic fine-tuning optima, policy-gradient fine-tuning and SDE/ODE gap metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod gap;
pub mod laws;
pub mod quadrature;
pub mod rlhf;
pub mod samplers;
pub mod stats;

pub use error::{Error, Result};
