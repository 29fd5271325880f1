//! Masked-conditional training: random keyframe masks, condition dropout,
//! sample-estimation loss, clipped AdamW and an EMA shadow.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::mask::{concat_mask, generate_mask, masked_sum, KeyframeCount, MaskScheme, ObservationSpec};
use crate::motion::{FeatureLayout, SkeletonSpec};
use crate::nn::{ParamStore, TextEmbedding, Trainable};
use crate::scalar::Scalar;

/// Entries the loss averages over. Padding rows never count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Every entry of the valid frames, observed keyframes included.
    #[default]
    Full,
    /// Only entries the mask left unobserved.
    Unobserved,
}

/// Learning-rate shape over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last iteration.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub text_dropout: f64,
    pub keyframe_dropout: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub mask_scheme: MaskScheme,
    /// When false no keyframes are ever revealed, which yields a plain
    /// unconditioned motion model for the inference-time baselines.
    pub mask_training: bool,
    pub loss: LossKind,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            iterations: 1_000_000,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 1e-2,
            batch_size: 64,
            grad_clip: 1.0,
            text_dropout: 0.1,
            keyframe_dropout: 0.1,
            ema_decay: 0.9999,
            seed: 0,
            diffusion_steps: 1000,
            mask_scheme: MaskScheme::RandomFramesAndJoints { count: KeyframeCount::Uniform },
            mask_training: true,
            loss: LossKind::Full,
            checkpoint_every: 50_000,
        }
    }

    /// Single-core laptop budget on the bundled synthetic corpus.
    pub fn desk() -> Self {
        Self {
            iterations: 8_000,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 16,
            ema_decay: 0.999,
            diffusion_steps: 100,
            checkpoint_every: 1_000,
            ..Self::paper()
        }
    }

    /// Rate for the optimizer step that follows `step` completed steps.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = (step as f64 / self.iterations.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.text_dropout) || !unit(self.keyframe_dropout) {
            return Err(Error::Invalid("dropout probabilities must lie in [0, 1]".into()));
        }
        if !unit(self.ema_decay) {
            return Err(Error::Invalid("EMA decay must lie in [0, 1]".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Invalid("clip norm and learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.diffusion_steps == 0 {
            return Err(Error::Invalid("batch size and diffusion steps must be positive".into()));
        }
        Ok(())
    }
}

/// A normalized, global-root clip padded to the model length.
#[derive(Debug, Clone)]
pub struct TrainingExample<T> {
    pub motion: Array2<T>,
    pub valid_length: usize,
    pub text: TextEmbedding<T>,
}

/// One fully drawn training sample.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    /// `[N × 2F]` masked noisy sample with its mask.
    pub input: Array2<T>,
    pub target: Array2<T>,
    pub mask: Array2<bool>,
    pub t: usize,
    pub text: TextEmbedding<T>,
    pub valid_length: usize,
    pub text_dropped: bool,
    pub keyframes_dropped: bool,
}

/// Draws mask, dropouts, step and noise for one example, in that order.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample<T: Scalar, R: Rng + ?Sized>(
    example: &TrainingExample<T>,
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PreparedSample<T>> {
    let (n, f) = example.motion.dim();
    let mut mask = if config.mask_training {
        generate_mask(&config.mask_scheme, skel, layout, example.valid_length, n, rng)?
    } else {
        Array2::from_elem((n, f), false)
    };
    let text_dropped = rng.random_bool(config.text_dropout);
    let keyframes_dropped = rng.random_bool(config.keyframe_dropout);
    if keyframes_dropped {
        mask.fill(false);
    }
    let t = rng.random_range(1..=schedule.steps());
    let mut eps = Array2::<T>::zeros((n, f));
    for v in eps.slice_mut(s![..example.valid_length, ..]).iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::lit(z);
    }
    let x_t = schedule.q_sample(&example.motion, t, &eps)?;
    let obs = ObservationSpec::from_values(example.motion.view(), mask.clone())?;
    let input = concat_mask(&masked_sum(&obs, &x_t)?, &mask)?;
    let text = if text_dropped {
        TextEmbedding::null(example.text.width())
    } else {
        example.text.clone()
    };
    Ok(PreparedSample {
        input,
        target: example.motion.clone(),
        mask,
        t,
        text,
        valid_length: example.valid_length,
        text_dropped,
        keyframes_dropped,
    })
}

/// Loss value and `∂loss/∂output` for one prediction.
pub fn loss_and_upstream<T: Scalar>(output: &Array2<T>, sample: &PreparedSample<T>, kind: LossKind) -> (f64, Array2<T>) {
    let f = output.ncols();
    let counted = |i: usize, j: usize| i < sample.valid_length && (kind == LossKind::Full || !sample.mask[[i, j]]);
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for i in 0..sample.valid_length {
        for j in 0..f {
            if counted(i, j) {
                let d = (output[[i, j]] - sample.target[[i, j]]).as_f64();
                sum += d * d;
                count += 1;
            }
        }
    }
    let mut upstream = Array2::zeros(output.dim());
    if count == 0 {
        return (0.0, upstream);
    }
    let k = T::lit(2.0 / count as f64);
    for i in 0..sample.valid_length {
        for j in 0..f {
            if counted(i, j) {
                upstream[[i, j]] = k * (output[[i, j]] - sample.target[[i, j]]);
            }
        }
    }
    (sum / count as f64, upstream)
}

/// Loss and parameter gradient for one prepared sample.
pub fn sample_gradient<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    sample: &PreparedSample<T>,
    kind: LossKind,
) -> Result<(f64, ParamStore<T>)> {
    let mut grads = model.parameters().zeros_like();
    let mut loss = 0.0;
    model.backward_params(
        &sample.input,
        sample.t,
        &sample.text,
        &mut |y| {
            let (l, up) = loss_and_upstream(y, sample, kind);
            loss = l;
            up
        },
        &mut grads,
    )?;
    Ok((loss, grads))
}

/// Rescales to `max_norm` when the global norm exceeds it. Returns the norm
/// before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// `θ_ema ← decay·θ_ema + (1 − decay)·θ`.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    ema.lerp_towards(params, T::lit(decay));
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = T::lit(1.0 - self.learning_rate * self.weight_decay);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let lr_c = T::lit(self.learning_rate / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        let ps = params.values_mut();
        for (k, p) in ps.iter_mut().enumerate() {
            let g = &grads.values()[k];
            let m = &mut self.m.values_mut()[k];
            let v = &mut self.v.values_mut()[k];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1t * *m + ob1 * g;
                *v = b2t * *v + ob2 * g * g;
                *p = *p * decay - lr_c * *m / ((*v * inv_c2).sqrt() + eps);
            });
        }
    }
}

/// Trainable network together with its EMA shadow and optimizer.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar, M> {
    pub model: M,
    pub ema: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
}

impl<T: Scalar, M: Trainable<T>> TrainState<T, M> {
    pub fn new(model: M, config: &TrainConfig) -> Self {
        let ema = model.parameters().clone();
        let optimizer = AdamW::new(model.parameters(), config.learning_rate, config.weight_decay);
        Self { model, ema, optimizer, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step over `batch`. Samples are drawn sequentially from
/// `rng`; gradients are computed in parallel and reduced in batch order.
pub fn train_step<T: Scalar, M: Trainable<T> + Sync, R: Rng + ?Sized>(
    state: &mut TrainState<T, M>,
    batch: &[&TrainingExample<T>],
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let prepared = batch
        .iter()
        .map(|ex| prepare_sample(ex, skel, layout, schedule, config, rng))
        .collect::<Result<Vec<_>>>()?;
    let model = &state.model;
    let results = prepared
        .par_iter()
        .map(|s| sample_gradient(model, s, config.loss))
        .collect::<Vec<_>>();
    let mut total = model.parameters().zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    loss /= n;
    total.scale(T::lit(1.0 / n));
    if !loss.is_finite() || !total.all_finite() {
        return Err(Error::Diverged { what: "loss", step: state.step });
    }
    let grad_norm = clip_gradients(&mut total, config.grad_clip);
    state.optimizer.step(state.model.parameters_mut(), &total);
    ema_update(&mut state.ema, state.model.parameters(), config.ema_decay);
    state.step += 1;
    Ok(StepStats { loss, grad_norm })
}

/// Loss history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<(usize, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.entries {
            out.push_str(&format!("{s},{l:?}\n"));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.1).collect()
    }

    /// Mean loss over the first and the last `fraction` of steps.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.entries.len();
        let k = ((n as f64 * fraction).ceil() as usize).max(1);
        if n < 2 * k {
            return None;
        }
        let l = self.losses();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&l[..k]), mean(&l[n - k..])))
    }
}

/// Runs `config.iterations` steps. `checkpoint` is called before the first
/// step, every `checkpoint_every` steps and after the last one.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Scalar, M: Trainable<T> + Sync>(
    state: &mut TrainState<T, M>,
    data: &[TrainingExample<T>],
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    checkpoint: &mut dyn FnMut(&TrainState<T, M>, &LossLog) -> Result<()>,
    progress: &mut dyn FnMut(usize, StepStats),
) -> Result<LossLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if schedule.steps() != config.diffusion_steps {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, config expects {}",
            schedule.steps(),
            config.diffusion_steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = LossLog::default();
    checkpoint(state, &log)?;
    for i in 0..config.iterations {
        let batch: Vec<&TrainingExample<T>> = (0..config.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        state.optimizer.learning_rate = config.learning_rate_at(state.step);
        let stats = train_step(state, &batch, skel, layout, schedule, config, &mut rng)?;
        log.entries.push((state.step, stats.loss));
        progress(state.step, stats);
        let last = i + 1 == config.iterations;
        if last || (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
            checkpoint(state, &log)?;
        }
    }
    Ok(log)
}
