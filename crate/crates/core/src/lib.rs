//! Token-level confidence estimation for recognizer hypotheses.
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod labeling;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use autodiff::{finite_diff_check, Gradients, Tape, Tensor, Var};
pub use error::{CheckpointError, Error, Result};
