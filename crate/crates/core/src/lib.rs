//! Self-bootstrapping pre-training for task-oriented dialogue encoders.
//!
//! A small transformer encoder is trained so that its representation of a
//! dialogue context predicts its own representation of the context followed
//! by a sampled response. The crate carries its own reverse-mode autodiff,
//! data pipeline, trainer, checkpoint format and downstream evaluation.

pub mod autograd;
pub mod checkpoint;

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;

pub mod gradcheck;
pub mod kernels;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub mod vocab;

pub use error::{Error, ErrorKind, Result};
