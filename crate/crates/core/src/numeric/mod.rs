//! Tensors, real FFTs, and reverse-mode differentiation.

pub mod fft;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use fft::{dft, idft, FftPlan, RealFft, Spectrum};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
