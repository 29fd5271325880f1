//! Ancestral sampling with keyframe conditioning, classifier-free guidance
//! and the inference-time imputation / reconstruction-guidance baselines.

use std::time::{Duration, Instant};

use ndarray::{s, Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::mask::{concat_mask, masked_sum, ObservationSpec};
use crate::motion::{MotionSequence, NormalizationStats, RootConvention};
use crate::nn::{Denoiser, TextEmbedding};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Keyframes enter through the masked input at every step.
    Conditional,
    /// Empty mask; text only.
    Unconditioned,
    /// Overwrite observed entries of `x̂0` while `t > C`.
    Imputation,
    /// Reconstruction guidance on unobserved entries, then imputation.
    ImputationPlusGuidance,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cond" | "conditional" => Ok(Strategy::Conditional),
            "uncond" | "unconditioned" => Ok(Strategy::Unconditioned),
            "imp" | "imputation" => Ok(Strategy::Imputation),
            "imp+guide" | "imputation+guidance" | "imputation_plus_guidance" => Ok(Strategy::ImputationPlusGuidance),
            other => Err(Error::Invalid(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Conditional => "conditional",
            Strategy::Unconditioned => "unconditioned",
            Strategy::Imputation => "imputation",
            Strategy::ImputationPlusGuidance => "imputation_plus_guidance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Differentiate the reconstruction loss through the network to `x_t`.
    #[default]
    ExactBackprop,
    /// Take the gradient with respect to `x̂0` and skip the network.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Classifier-free guidance weight `w`.
    pub cfg_weight: f64,
    /// Reconstruction guidance weight `w_r`.
    pub guidance_weight: f64,
    /// Imputation stops once `t ≤ C`.
    pub stop_step: usize,
    #[serde(default)]
    pub guidance_mode: GuidanceMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Conditional,
            cfg_weight: 2.5,
            guidance_weight: 20.0,
            stop_step: 1,
            guidance_mode: GuidanceMode::ExactBackprop,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.cfg_weight >= 0.0) || !(self.guidance_weight >= 0.0) {
            return Err(Error::Invalid("guidance weights must be non-negative".into()));
        }
        if self.stop_step > steps {
            return Err(Error::Invalid(format!("stop step {} exceeds T = {steps}", self.stop_step)));
        }
        Ok(())
    }
}

/// `(1 − w)·uncond + w·cond`, i.e. `uncond + w·(cond − uncond)`.
pub fn cfg_combine<T: Scalar>(uncond: &Array2<T>, cond: &Array2<T>, w: f64) -> Result<Array2<T>> {
    if uncond.dim() != cond.dim() {
        return Err(Error::Shape(format!("branches {:?} and {:?}", uncond.dim(), cond.dim())));
    }
    let (a, b) = (T::lit(1.0 - w), T::lit(w));
    Ok(Zip::from(uncond).and(cond).map_collect(|&u, &c| a * u + b * c))
}

/// `x̂0` under classifier-free guidance. A null prompt needs one branch.
pub fn guided_estimate<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    input: &Array2<T>,
    t: usize,
    text: &TextEmbedding<T>,
    w: f64,
) -> Result<(Array2<T>, usize)> {
    let cond = model.predict(input, t, text)?;
    if text.is_null() {
        return Ok((cond, 1));
    }
    let uncond = model.predict(input, t, &TextEmbedding::null(text.width()))?;
    Ok((cfg_combine(&uncond, &cond, w)?, 2))
}

/// `∂/∂x ‖m ⊙ (c − x̂0)‖²` seen from `x̂0`: `−2·m ⊙ (c − x̂0)`.
fn residual_gradient<T: Scalar>(x0_hat: &Array2<T>, obs: &ObservationSpec<T>) -> Array2<T> {
    let two = T::lit(2.0);
    Zip::from(x0_hat)
        .and(obs.signal())
        .and(obs.mask())
        .map_collect(|&x, &c, &m| if m { two * (x - c) } else { T::zero() })
}

/// Gradient of the reconstruction loss `‖m ⊙ (c − x̂0)‖²` at the state
/// `x_t`, along with the guided `x̂0`. The network sees `x_t` next to an
/// empty mask, as in inference-time in-betweening.
pub fn guidance_gradient<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    x_t: &Array2<T>,
    t: usize,
    text: &TextEmbedding<T>,
    obs: &ObservationSpec<T>,
    w: f64,
    mode: GuidanceMode,
) -> Result<(Array2<T>, Array2<T>, usize)> {
    let f = x_t.ncols();
    let empty = Array2::from_elem(x_t.dim(), false);
    let input = concat_mask(x_t, &empty)?;
    if mode == GuidanceMode::Surrogate {
        let (x0_hat, evals) = guided_estimate(model, &input, t, text, w)?;
        let g = residual_gradient(&x0_hat, obs);
        return Ok((x0_hat, g, evals));
    }
    let first_f = |g: Array2<T>| g.slice(s![.., ..f]).to_owned();
    if text.is_null() {
        let (y, g) = model.predict_vjp(&input, t, text, &mut |y| residual_gradient(y, obs))?;
        return Ok((y, first_f(g), 1));
    }
    let null = TextEmbedding::null(text.width());
    let uncond = model.predict(&input, t, &null)?;
    let mut combined = None;
    let mut residual = None;
    let (_, g_cond) = model.predict_vjp(&input, t, text, &mut |cond| {
        let x0 = cfg_combine(&uncond, cond, w).expect("branch shapes agree");
        let r = residual_gradient(&x0, obs);
        let up = r.mapv(|v| v * T::lit(w));
        combined = Some(x0);
        residual = Some(r);
        up
    })?;
    let r = residual.expect("upstream ran");
    let (_, g_uncond) = model.predict_vjp(&input, t, &null, &mut |_| r.mapv(|v| v * T::lit(1.0 - w)))?;
    Ok((combined.expect("upstream ran"), first_f(g_cond + g_uncond), 3))
}

/// `x̂0 − (w_r·√ᾱ_t / 2)·∇` on unobserved entries; observed entries are left
/// alone.
pub fn reconstruction_guidance<T: Scalar>(
    x0_hat: &Array2<T>,
    gradient: &Array2<T>,
    obs: &ObservationSpec<T>,
    t: usize,
    w_r: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<T>> {
    if x0_hat.dim() != gradient.dim() || x0_hat.dim() != obs.dim() {
        return Err(Error::Shape("guidance operands disagree".into()));
    }
    if w_r == 0.0 || obs.is_empty() {
        return Ok(x0_hat.clone());
    }
    if let Some(pos) = gradient.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: pos / gradient.ncols(), col: pos % gradient.ncols() });
    }
    let k = T::lit(w_r * schedule.alpha_bar(t).sqrt() / 2.0);
    Ok(Zip::from(x0_hat)
        .and(gradient)
        .and(obs.mask())
        .map_collect(|&x, &g, &m| if m { x } else { x - k * g }))
}

/// Replaces observed entries while `t > C`.
pub fn impute<T: Scalar>(x0_hat: &Array2<T>, obs: &ObservationSpec<T>, t: usize, stop_step: usize) -> Result<Array2<T>> {
    if t > stop_step {
        masked_sum(obs, x0_hat)
    } else {
        Ok(x0_hat.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    /// Normalized global-root features, `[rows × F]`, zero beyond `length`.
    pub features: Array2<T>,
    pub length: usize,
    /// Denoising steps taken.
    pub steps: usize,
    /// Forward passes over all branches.
    pub evaluations: usize,
    pub elapsed: Duration,
}

fn zero_tail<T: Scalar>(x: &mut Array2<T>, length: usize) {
    x.slice_mut(s![length.., ..]).fill(T::zero());
}

/// Runs the reverse chain from `x_T ~ N(0, I)` in normalized space. Rows at
/// or beyond `length` are held at zero, matching the padded training clips.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    text: &TextEmbedding<T>,
    obs: &ObservationSpec<T>,
    length: usize,
) -> Result<SampleOutput<T>> {
    let started = Instant::now();
    config.validate(schedule.steps())?;
    let (rows, f) = obs.dim();
    if f != model.feature_width() {
        return Err(Error::Shape(format!("observation width {f} vs model width {}", model.feature_width())));
    }
    if length == 0 || length > rows || rows > model.max_frames() {
        return Err(Error::Shape(format!("length {length} with {rows} rows (model limit {})", model.max_frames())));
    }
    if config.strategy == Strategy::Conditional && !model.mask_conditioned() {
        return Err(Error::StrategyMismatch { strategy: config.strategy.name().into() });
    }
    if obs.mask().slice(s![length.., ..]).iter().any(|&m| m) {
        return Err(Error::Invalid("keyframes beyond the requested length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normal = |shape: (usize, usize)| -> Array2<T> {
        Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        })
    };
    let mut x = normal((rows, f));
    zero_tail(&mut x, length);
    let empty_mask = Array2::from_elem((rows, f), false);
    let mut evaluations = 0;
    for t in (1..=schedule.steps()).rev() {
        let (x0_hat, state) = match config.strategy {
            Strategy::Conditional => {
                let replaced = masked_sum(obs, &x)?;
                let input = concat_mask(&replaced, obs.mask())?;
                let (x0, n) = guided_estimate(model, &input, t, text, config.cfg_weight)?;
                evaluations += n;
                (x0, replaced)
            }
            Strategy::Unconditioned | Strategy::Imputation => {
                let input = concat_mask(&x, &empty_mask)?;
                let (mut x0, n) = guided_estimate(model, &input, t, text, config.cfg_weight)?;
                evaluations += n;
                if config.strategy == Strategy::Imputation {
                    x0 = impute(&x0, obs, t, config.stop_step)?;
                }
                (x0, x)
            }
            Strategy::ImputationPlusGuidance => {
                let mut x0 = if config.guidance_weight == 0.0 || obs.is_empty() {
                    let input = concat_mask(&x, &empty_mask)?;
                    let (x0, n) = guided_estimate(model, &input, t, text, config.cfg_weight)?;
                    evaluations += n;
                    x0
                } else {
                    let (x0, g, n) = guidance_gradient(model, &x, t, text, obs, config.cfg_weight, config.guidance_mode)?;
                    evaluations += n;
                    reconstruction_guidance(&x0, &g, obs, t, config.guidance_weight, schedule)?
                };
                x0 = impute(&x0, obs, t, config.stop_step)?;
                (x0, x)
            }
        };
        let mut next = schedule.posterior_mean(&x0_hat, &state, t)?;
        let z = normal((rows, f));
        if t > 1 {
            let sigma = T::lit(schedule.sigma(t));
            next.zip_mut_with(&z, |v, &z| *v += sigma * z);
        }
        zero_tail(&mut next, length);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { what: "sampler state", step: t });
        }
        x = next;
    }
    Ok(SampleOutput {
        features: x,
        length,
        steps: schedule.steps(),
        evaluations,
        elapsed: started.elapsed(),
    })
}

/// Samples from world-unit keyframes and returns a denormalized global-root
/// clip.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    stats: &NormalizationStats<T>,
    config: &SamplerConfig,
    text: &TextEmbedding<T>,
    world_obs: &ObservationSpec<T>,
    length: usize,
    fps: f32,
) -> Result<(MotionSequence<T>, SampleOutput<T>)> {
    let obs = world_obs.normalized(stats)?;
    let out = sample(model, schedule, config, text, &obs, length)?;
    let mut world = stats.denormalize_rows(out.features.view())?;
    zero_tail(&mut world, length);
    let seq = MotionSequence::new(world, fps, length, RootConvention::GlobalRoot)?;
    Ok((seq, out))
}
