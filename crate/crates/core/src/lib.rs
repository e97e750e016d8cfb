//! Masked diffusion language modeling at desk scale: an absorbing-state
//! discrete diffusion process, a small bidirectional transformer denoiser,
//! a learned Bernoulli unmasking planner, exact rollout likelihoods, and a
//! group-relative policy gradient trainer with verifiable rewards.
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff tape so
//! gradients can be checked against finite differences and rollout
//! probabilities against brute-force enumeration.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod grpo;
pub mod likelihood;
pub mod mdlm;
pub mod model;
pub mod pipeline;
pub mod planner_init;
pub mod rewards;
pub mod rng;

pub use error::{Error, Result};
