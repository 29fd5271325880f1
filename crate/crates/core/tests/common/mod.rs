#![allow(dead_code)]

use condmdi::motion::{FeatureLayout, SkeletonSpec};
use condmdi::nn::{FrameMlp, FrameMlpConfig, TextEmbedding};
use condmdi::training::TrainingExample;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Pelvis with two feet: 35 feature columns.
pub fn small_skeleton() -> (SkeletonSpec, FeatureLayout) {
    let names = ["pelvis", "left_foot", "right_foot"].map(String::from).to_vec();
    let skel = SkeletonSpec::new(
        "tripod",
        names,
        vec![None, Some(0), Some(0)],
        vec![[0.0; 3], [0.1, -0.9, 0.0], [-0.1, -0.9, 0.0]],
        [1, 1, 2, 2],
        0,
    )
    .unwrap();
    let layout = FeatureLayout::canonical(&skel);
    (skel, layout)
}

pub fn mlp(f: usize, hidden: usize, text: usize, frames: usize, seed: u64) -> FrameMlp<f64> {
    FrameMlp::new(
        FrameMlpConfig {
            feature_width: f,
            hidden,
            text_width: text,
            max_frames: frames,
            mask_conditioned: true,
        },
        seed,
    )
    .unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut *rng))
}

pub fn text(rng: &mut ChaCha8Rng, w: usize) -> TextEmbedding<f64> {
    TextEmbedding::from_vec((0..w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Smooth random clips, zero past their valid length.
pub fn examples(count: usize, rows: usize, f: usize, text_w: usize, seed: u64) -> Vec<TrainingExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let valid = rng.random_range(rows / 2..=rows);
            let phase: Vec<f64> = (0..f).map(|_| rng.random_range(0.0..6.28)).collect();
            let freq: f64 = rng.random_range(0.1..0.4);
            let mut motion = Array2::zeros((rows, f));
            for i in 0..valid {
                for j in 0..f {
                    motion[[i, j]] = (freq * i as f64 + phase[j]).sin();
                }
            }
            TrainingExample {
                motion,
                valid_length: valid,
                text: text(&mut rng, text_w),
            }
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
