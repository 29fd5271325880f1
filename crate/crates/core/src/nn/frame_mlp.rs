use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::text::TextEmbedding;
use super::unet::timestep_features;
use super::{Denoiser, Trainable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width of the sinusoidal step features.
const STEP_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMlpConfig {
    pub feature_width: usize,
    pub hidden: usize,
    pub text_width: usize,
    pub max_frames: usize,
    pub mask_conditioned: bool,
}

/// One three-tap temporal convolution, a step- and text-dependent scale and
/// shift, SiLU and a linear read-out. Small enough for exhaustive gradient
/// checks and fast desk experiments.
#[derive(Debug, Clone)]
pub struct FrameMlp<T: Scalar> {
    config: FrameMlpConfig,
    params: ParamStore<T>,
    conv: (ParamId, ParamId),
    step: (ParamId, ParamId),
    text: (ParamId, ParamId),
    null_text: ParamId,
    out: (ParamId, ParamId),
}

impl<T: Scalar> FrameMlp<T> {
    pub fn new(config: FrameMlpConfig, seed: u64) -> Result<Self> {
        if config.feature_width == 0 || config.hidden == 0 || config.text_width == 0 || config.max_frames == 0 {
            return Err(Error::Invalid("frame MLP sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (f2, h, w) = (2 * config.feature_width, config.hidden, config.text_width);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let conv = (
            p.insert_normal("conv.w", (3 * f2, h), he(3 * f2), &mut rng),
            p.insert_zeros("conv.b", (1, h)),
        );
        let step = (
            p.insert_normal("step.w", (STEP_FEATURES, 2 * h), 0.5 * he(STEP_FEATURES), &mut rng),
            p.insert_zeros("step.b", (1, 2 * h)),
        );
        let text = (
            p.insert_normal("text.w", (w, 2 * h), 0.5 * he(w), &mut rng),
            p.insert_zeros("text.b", (1, 2 * h)),
        );
        let null_text = p.insert_normal("text.null", (1, w), 1.0 / (w as f64).sqrt(), &mut rng);
        let out = (
            p.insert_normal("out.w", (h, config.feature_width), he(h), &mut rng),
            p.insert_zeros("out.b", (1, config.feature_width)),
        );
        Ok(Self {
            config,
            params: p,
            conv,
            step,
            text,
            null_text,
            out,
        })
    }

    pub fn config(&self) -> &FrameMlpConfig {
        &self.config
    }

    fn forward_on<'p>(&'p self, tape: &mut Tape<'p, T>, input: &Array2<T>, t: usize, text: &TextEmbedding<T>, input_grad: bool) -> Result<(Var, Var)> {
        let c = &self.config;
        if input.ncols() != 2 * c.feature_width || input.nrows() == 0 || input.nrows() > c.max_frames {
            return Err(Error::Shape(format!("input {:?} does not fit the network", input.dim())));
        }
        if text.width() != c.text_width {
            return Err(Error::Shape(format!("text width {} vs {}", text.width(), c.text_width)));
        }
        let x = tape.input(input.clone(), input_grad);
        let h = tape.conv1d(x, self.conv.0, self.conv.1, 3, 1);
        let tf = timestep_features(t, STEP_FEATURES).into_iter().map(T::lit).collect();
        let tf = tape.input(Array2::from_shape_vec((1, STEP_FEATURES), tf).expect("row"), false);
        let e = tape.linear(tf, self.step.0, self.step.1);
        let txt = if text.is_null() {
            tape.param(self.null_text)
        } else {
            tape.input(text.vector().clone(), false)
        };
        let txt = tape.linear(txt, self.text.0, self.text.1);
        let e = tape.add(e, txt);
        let scale = tape.slice_cols(e, 0, c.hidden);
        let shift = tape.slice_cols(e, c.hidden, 2 * c.hidden);
        let h = tape.scale_shift(h, scale, shift);
        let h = tape.silu(h);
        let y = tape.linear(h, self.out.0, self.out.1);
        Ok((x, y))
    }
}

impl<T: Scalar> Denoiser<T> for FrameMlp<T> {
    fn feature_width(&self) -> usize {
        self.config.feature_width
    }

    fn text_width(&self) -> usize {
        self.config.text_width
    }

    fn max_frames(&self) -> usize {
        self.config.max_frames
    }

    fn mask_conditioned(&self) -> bool {
        self.config.mask_conditioned
    }

    fn predict(&self, input: &Array2<T>, t: usize, text: &TextEmbedding<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new(&self.params, false);
        let (_, out) = self.forward_on(&mut tape, input, t, text, false)?;
        Ok(tape.value(out).clone())
    }

    fn predict_vjp(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let mut tape = Tape::new(&self.params, false);
        let (x, out) = self.forward_on(&mut tape, input, t, text, true)?;
        let y = tape.value(out).clone();
        let seed = upstream(&y);
        let mut g = tape.backward(out, seed, None);
        let gx = g.take(x).unwrap_or_else(|| Array2::zeros(input.dim()));
        Ok((y, gx))
    }
}

impl<T: Scalar> Trainable<T> for FrameMlp<T> {
    fn parameters(&self) -> &ParamStore<T> {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn backward_params(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new(&self.params, true);
        let (_, out) = self.forward_on(&mut tape, input, t, text, false)?;
        let y = tape.value(out).clone();
        let seed = upstream(&y);
        tape.backward(out, seed, Some(grads));
        Ok(y)
    }
}
