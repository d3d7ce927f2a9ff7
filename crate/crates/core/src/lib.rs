//! Long-horizon time-series forecasting with learnable frequency filters.
//!
//! The crate is organized bottom-up:
//!
//! * [`numeric`]: dense tensors, half-complex FFTs, and a reverse-mode tape.
//! * [`spectral`]: the learnable circular-convolution filter and the
//!   spectral block that wraps it with normalization.
//! * [`model`]: reversible instance normalization, patch embedding,
//!   attention blocks, and the assembled forecaster.
//! * [`data`]: CSV ingestion, splits, sliding windows, and synthetic signals.
//! * [`training`]: loss, Adam, early-stopped fitting, and evaluation.

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod spectral;
pub mod training;
mod util;

pub use error::{Error, ErrorKind, Result};
pub use numeric::{Tensor, Var};
pub use util::{stream_rng, thread_pool, THREADS_ENV};
