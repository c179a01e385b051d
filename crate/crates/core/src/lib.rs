//! Flow-matching prior on 2D toy data with training-free conditional sampling.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod guidance;
pub mod optim;
pub mod ot;
pub mod schedule;
pub mod source;
pub mod tensor;
pub mod train;
pub mod transport;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
