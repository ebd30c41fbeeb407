//! Rank allocation for low-rank adapters sent over a fading link: a Gaussian
//! PPO policy proposes coarse ranks, a conditional denoiser refines them, and
//! a surrogate environment scores task loss against transmission cost.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod numerics;
pub mod par;
pub mod ppo;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
