//! Keyframe in-betweening with masked-conditional motion diffusion.
//!
//! A denoiser is trained on motion clips whose frames and joints are
//! randomly revealed through an observation mask; at inference the same
//! network fills in everything between sparse, possibly partial keyframes.
//! Inference-time imputation and reconstruction guidance are available as
//! baselines, along with the usual metric suite.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod motion;
pub mod nn;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases used by the training and serving paths.
pub type Motion = motion::MotionSequence<f32>;
pub type Stats = motion::NormalizationStats<f32>;
pub type Observation = mask::ObservationSpec<f32>;
pub type Network = nn::UNet<f32>;
pub type Params = nn::ParamStore<f32>;

/// Double-precision aliases used by oracles and analysis.
pub type Motion64 = motion::MotionSequence<f64>;
pub type Observation64 = mask::ObservationSpec<f64>;
pub type Network64 = nn::UNet<f64>;
