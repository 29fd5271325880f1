//! Metric suite and the scheme-driven evaluation harness.

mod metrics;

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    diversity, fid, foot_skating_ratio, keyframe_error, mean_and_covariance, paired_distance, r_precision_top3,
    CONTACT_HEIGHT, FID_RIDGE, SKATE_DISTANCE,
};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::mask::{generate_mask_seeded, MaskScheme, ObservationSpec};
use crate::motion::{recover_joint_positions, FeatureLayout, MotionSequence, NormalizationStats, SkeletonSpec};
use crate::nn::{Denoiser, HashedBagOfTokens, TextEmbedding, TextEncoder};
use crate::sampling::{generate, SamplerConfig};
use crate::scalar::Scalar;

/// Embeds motions and prompts into a shared space for FID, diversity and
/// retrieval.
pub trait FeatureExtractor: Send + Sync {
    fn width(&self) -> usize;

    /// `seq` is a world-unit, global-root clip.
    fn motion_features(&self, seq: &MotionSequence<f64>) -> Vec<f64>;

    fn text_features(&self, prompt: &str) -> Vec<f64>;
}

/// Mean valid pose through a fixed random projection, and hashed tokens for
/// text. Deterministic and cheap; its numbers are not comparable with those
/// of learned evaluator encoders.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    projection: Array2<f64>,
    text: HashedBagOfTokens,
}

impl ToyExtractor {
    pub fn new(feature_width: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (feature_width as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((feature_width, width), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self {
            projection,
            text: HashedBagOfTokens::new(width),
        }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn width(&self) -> usize {
        self.projection.ncols()
    }

    fn motion_features(&self, seq: &MotionSequence<f64>) -> Vec<f64> {
        let mean = seq.valid().mean_axis(Axis(0)).expect("at least one valid frame");
        mean.dot(&self.projection).to_vec()
    }

    fn text_features(&self, prompt: &str) -> Vec<f64> {
        self.text.encode_vec(prompt)
    }
}

/// A reference clip: world units, global root.
#[derive(Debug, Clone)]
pub struct EvalClip<T> {
    pub motion: MotionSequence<T>,
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    /// `S_d`; shrunk to half the sample count when fewer clips exist.
    pub diversity_subset: usize,
    pub r_precision_batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            diversity_subset: 200,
            r_precision_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub r_precision_top3: f64,
    pub diversity: f64,
    pub foot_skating_ratio: f64,
    /// Mean over clips with at least one observed root position, meters.
    pub keyframe_error_m: f64,
    pub generated_samples: usize,
    pub reference_samples: usize,
    pub keyframed_samples: usize,
    pub clip_keyframe_errors: Vec<Option<f64>>,
    pub wall_clock_ms: f64,
    pub config: serde_json::Value,
}

/// Everything sampling needs besides the per-run configuration.
pub struct ModelContext<'a, T: Scalar, D: ?Sized> {
    pub model: &'a D,
    pub schedule: &'a NoiseSchedule,
    pub stats: &'a NormalizationStats<T>,
    pub skeleton: &'a SkeletonSpec,
    pub layout: &'a FeatureLayout,
    pub text: &'a dyn TextEncoder,
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> ModelContext<'_, T, D> {
    pub fn embed(&self, prompt: Option<&str>) -> TextEmbedding<T> {
        match prompt {
            None => TextEmbedding::null(self.text.width()),
            Some(p) => TextEmbedding::from_vec(self.text.encode_vec(p).into_iter().map(T::lit).collect()),
        }
    }
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let w = v.first().map_or(0, Vec::len);
    Array2::from_shape_vec((v.len(), w), v.concat()).expect("equal widths")
}

/// Mixes a base seed with a clip index.
pub fn clip_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

struct ClipResult {
    features: Vec<f64>,
    keyframe_error: Option<f64>,
    skating: f64,
}

/// Generates one clip per reference using its prompt and keyframes drawn by
/// `scheme`, then scores the generated set.
pub fn evaluate_scheme<T: Scalar, D: Denoiser<T> + ?Sized>(
    ctx: &ModelContext<'_, T, D>,
    clips: &[EvalClip<T>],
    scheme: &MaskScheme,
    sampler: &SamplerConfig,
    extractor: &dyn FeatureExtractor,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let started = Instant::now();
    if clips.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let rows_n = ctx.model.max_frames();
    let results = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| -> Result<ClipResult> {
            let reference = clip.motion.pad_or_trim(rows_n)?;
            let length = reference.valid_length();
            let mask = generate_mask_seeded(scheme, ctx.skeleton, ctx.layout, length, rows_n, clip_seed(options.seed, i))?;
            let obs = ObservationSpec::from_values(reference.data().view(), mask)?;
            let config = SamplerConfig {
                seed: clip_seed(sampler.seed, i),
                ..sampler.clone()
            };
            let text = ctx.embed(clip.prompt.as_deref());
            let (seq, _) = generate(ctx.model, ctx.schedule, ctx.stats, &config, &text, &obs, length, reference.fps())?;
            let keyframe_error = if obs.root_keyframes().is_empty() {
                None
            } else {
                Some(keyframe_error(&seq, &obs)?)
            };
            let seq64 = seq.cast::<f64>();
            let positions = recover_joint_positions(&seq64, ctx.skeleton, ctx.layout)?;
            let skating = if length >= 2 {
                foot_skating_ratio(&positions.slice(ndarray::s![..length, .., ..]).to_owned(), ctx.skeleton)?
            } else {
                0.0
            };
            Ok(ClipResult {
                features: extractor.motion_features(&seq64),
                keyframe_error,
                skating,
            })
        })
        .collect::<Vec<_>>();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len();
    let generated = rows(&results.iter().map(|r| r.features.clone()).collect::<Vec<_>>());
    let reference = rows(
        &clips
            .iter()
            .map(|c| extractor.motion_features(&c.motion.cast::<f64>()))
            .collect::<Vec<_>>(),
    );
    let texts = rows(
        &clips
            .iter()
            .map(|c| extractor.text_features(c.prompt.as_deref().unwrap_or("")))
            .collect::<Vec<_>>(),
    );
    let errors: Vec<f64> = results.iter().filter_map(|r| r.keyframe_error).collect();
    let keyframe_error_m = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    let subset = options.diversity_subset.min(n / 2);
    let batch = options.r_precision_batch.min(n);
    let report = EvalReport {
        fid: fid(&reference, &generated)?,
        r_precision_top3: r_precision_top3(&generated, &texts, batch, options.seed)?,
        diversity: diversity(&generated, subset, options.seed)?,
        foot_skating_ratio: results.iter().map(|r| r.skating).sum::<f64>() / n as f64,
        keyframe_error_m,
        generated_samples: n,
        reference_samples: clips.len(),
        keyframed_samples: errors.len(),
        clip_keyframe_errors: results.iter().map(|r| r.keyframe_error).collect(),
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        config: serde_json::json!({
            "scheme": scheme,
            "sampler": sampler,
            "options": options,
            "diffusion_steps": ctx.schedule.steps(),
            "extractor_width": extractor.width(),
        }),
    };
    Ok(report)
}
