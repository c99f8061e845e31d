//! Teacher–student laboratory for sequence-length extrapolation in linear
//! recurrent networks, with a small GRU extension.
//!
//! The crate is organised bottom-up:
//!
//! - [`lds`]: parameters, impulse responses, diagonalization, extrapolation error.
//! - [`losses`]: population, empirical and accumulating losses with analytic gradients.
//! - [`optim`]: GD, RK4 gradient flow and Adam with trajectory instrumentation.
//! - [`moments`]: atomic distributions, moment recovery, Wasserstein distances.
//! - [`teachers`]: balanced, delay, random-unbalanced and GRU teacher generators.
//! - [`gru`]: GRU cell with backpropagation through time.

pub mod error;
pub mod gru;
pub mod lds;
pub mod linalg;
pub mod losses;
pub mod moments;
pub mod optim;
pub mod seeds;
pub mod teachers;

pub use error::{LabError, Result};
pub use lds::{ImpulseResponse, LinearRnnParams, Structure};
