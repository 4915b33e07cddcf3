//! Dense ReLU layers built so that at least one neuron is active for every
//! input, together with the linear-programming machinery that certifies the
//! guarantee and a small experiment harness for studying it.
//!
//! The pieces:
//!
//! * [`tensor`]: rank-1/rank-2 `f64` tensors and a define-by-run
//!   differentiation tape (rebuilt on every forward pass).
//! * [`farkas`]: the guaranteed-active layer and residual block. The last row
//!   of the weight matrix is a fixed negative combination of the trainable
//!   rows and the last bias is clamped, so a simplex vector `lambda` with
//!   `lambda' W = 0` and `lambda' b > 0` exists by construction.
//! * [`lp`]: a dense two-phase simplex solver for the min-max margin LP, the
//!   dual bound, certificate checking, a brute-force grid oracle, and the
//!   reduction of half-space feasibility to nonnegative standard form.
//! * [`net`]: network specs, construction, initialization schemes, batch
//!   normalization, and born-dead detection over a probe set.
//! * [`train`]: SGD with momentum, toy dataset generators, IDX/CSV loaders,
//!   and the desk-scale experiments.
//! * [`verify`]: audits a network layer by layer, re-deriving each layer's
//!   margin LP and checking stored certificates.
//! * [`weights`] / [`config`] / [`report`]: the binary checkpoint format, the
//!   flat key-value config format, and CSV/JSON report writers.

pub mod config;
pub mod error;
pub mod farkas;
pub mod lp;
pub mod net;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
