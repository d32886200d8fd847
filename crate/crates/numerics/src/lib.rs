//! Minimal dense-tensor engine for desk-scale language models.
//!
//! Everything is 64-bit float. A [`Tape`] records operations as they are
//! applied and replays them in reverse for gradients; a fresh tape is built
//! for every training step. [`AdamW`] consumes the gradients collected in a
//! [`ParamSet`].

mod error;
mod kernels;
mod optim;
pub mod rng;
mod tape;
mod tensor;

pub use error::{NumericsError, OpKind, Result};
pub use kernels::{argmax, softmax_rows_in_place};
pub use optim::{AdamW, AdamWConfig, OptimizerState, ParamSet, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
