//! Dense linear algebra, reverse-mode differentiation and optimization for
//! the small networks used by the policy stack.

mod checkpoint;
mod matrix;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use matrix::Matrix;
pub use nn::{Activation, Linear};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
