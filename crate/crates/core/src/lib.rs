//! Training, fusion and evaluation of shared-initialization specialists.

pub mod analysis;
pub mod corpus;
pub mod evaluation;
pub mod fusion;
pub mod harness;
mod error;
pub mod model;
pub mod protocol;

pub use error::{CoopError, Result};
