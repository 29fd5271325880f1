//! Denoiser networks and the small autodiff engine they are trained with.

mod frame_mlp;
mod params;
mod tape;
mod text;
mod unet;

use ndarray::Array2;

pub use frame_mlp::{FrameMlp, FrameMlpConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use text::{tokenize, HashedBagOfTokens, TextEmbedding, TextEncoder, DEFAULT_TEXT_WIDTH};
pub use unet::{timestep_features, DenoiserConfig, Normalization, UNet};

use crate::error::Result;
use crate::scalar::Scalar;

/// Sample estimator `G(x̃_t ⊕ m, t, p) → x̂0`.
///
/// Inputs are `[N × 2F]`: the masked sample followed by the mask.
pub trait Denoiser<T: Scalar>: Send + Sync {
    fn feature_width(&self) -> usize;

    fn text_width(&self) -> usize;

    fn max_frames(&self) -> usize;

    /// False for networks trained without keyframes in the mask channels.
    fn mask_conditioned(&self) -> bool;

    fn predict(&self, input: &Array2<T>, t: usize, text: &TextEmbedding<T>) -> Result<Array2<T>>;

    /// Runs the network, asks `upstream` for `∂L/∂output` and returns the
    /// output together with `∂L/∂input`.
    fn predict_vjp(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)>;
}

pub trait Trainable<T: Scalar>: Denoiser<T> {
    fn parameters(&self) -> &ParamStore<T>;

    fn parameters_mut(&mut self) -> &mut ParamStore<T>;

    /// Runs the network and adds `∂L/∂θ` into `grads`, where `upstream`
    /// supplies `∂L/∂output`. Returns the output.
    fn backward_params(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Array2<T>>;
}
