//! Coarse-to-fine adversarial single-image dehazing.
//!
//! Pipeline: synthesize paired hazy/clear data with the atmospheric
//! scattering model, train a one-encoder/two-decoder generator against a
//! Wasserstein critic with gradient penalty, evaluate with luminance-channel
//! PSNR/SSIM, and run inference on arbitrary images.

pub mod error;
pub mod eval;
pub mod haze;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{DehazeError, Result};

/// Default scalar for training and evaluation.
pub type Real = f64;
pub type Tape = tensor::Tape<Real>;
pub type Var = tensor::Var<Real>;
pub type TapeF32 = tensor::Tape<f32>;
pub type VarF32 = tensor::Var<f32>;
