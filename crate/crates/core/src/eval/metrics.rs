use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::ObservationSpec;
use crate::motion::{MotionSequence, RootConvention, SkeletonSpec};
use crate::scalar::Scalar;

/// Contact threshold on foot height, meters.
pub const CONTACT_HEIGHT: f64 = 0.05;
/// Horizontal slide that counts as skating, meters.
pub const SKATE_DISTANCE: f64 = 0.025;

/// Mean ground-plane distance between generated and target root positions
/// over frames whose root position is observed. World units.
pub fn keyframe_error<T: Scalar>(generated: &MotionSequence<T>, obs: &ObservationSpec<T>) -> Result<f64> {
    generated.expect_convention(RootConvention::GlobalRoot)?;
    let frames = obs.root_keyframes();
    if frames.is_empty() {
        return Err(Error::Invalid("keyframe error needs at least one observed root position".into()));
    }
    let data = generated.data();
    if obs.dim().1 != data.ncols() || frames.iter().any(|&f| f >= data.nrows()) {
        return Err(Error::Shape("observation does not fit the generated clip".into()));
    }
    let c = obs.signal();
    let total: f64 = frames
        .iter()
        .map(|&f| {
            let dx = (data[[f, 1]] - c[[f, 1]]).as_f64();
            let dz = (data[[f, 2]] - c[[f, 2]]).as_f64();
            (dx * dx + dz * dz).sqrt()
        })
        .sum();
    Ok(total / frames.len() as f64)
}

/// Fraction of frame transitions in which some foot joint is in contact at
/// both ends and slides more than [`SKATE_DISTANCE`] horizontally.
pub fn foot_skating_ratio(positions: &Array3<f64>, skel: &SkeletonSpec) -> Result<f64> {
    let (n, j, _) = positions.dim();
    let feet = skel.foot_joints();
    if feet.is_empty() {
        return Err(Error::Invalid("skeleton has no foot joints".into()));
    }
    if n < 2 {
        return Err(Error::Invalid("foot skating needs at least two frames".into()));
    }
    if feet.iter().any(|&f| f >= j) {
        return Err(Error::Shape(format!("foot joint outside {j} joints")));
    }
    let skating = (0..n - 1)
        .filter(|&i| {
            feet.iter().any(|&f| {
                let (a, b) = (positions[[i, f, 1]], positions[[i + 1, f, 1]]);
                let dx = positions[[i + 1, f, 0]] - positions[[i, f, 0]];
                let dz = positions[[i + 1, f, 2]] - positions[[i, f, 2]];
                a < CONTACT_HEIGHT && b < CONTACT_HEIGHT && (dx * dx + dz * dz).sqrt() > SKATE_DISTANCE
            })
        })
        .count();
    Ok(skating as f64 / (n - 1) as f64)
}

/// `(1/S)·Σ‖a_i − b_i‖` over paired rows.
pub fn paired_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::Shape(format!("pairs {:?} vs {:?}", a.dim(), b.dim())));
    }
    let total: f64 = a
        .outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.nrows() as f64)
}

/// Mean distance between two disjoint random subsets of size `subset`.
pub fn diversity(features: &Array2<f64>, subset: usize, seed: u64) -> Result<f64> {
    if subset == 0 || features.nrows() < 2 * subset {
        return Err(Error::InsufficientSamples { need: 2 * subset.max(1), have: features.nrows() });
    }
    let mut idx: Vec<usize> = (0..features.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let a = features.select(ndarray::Axis(0), &idx[..subset]);
    let b = features.select(ndarray::Axis(0), &idx[subset..2 * subset]);
    paired_distance(&a, &b)
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_and_covariance(x: &Array2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, have: n });
    }
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Ridge added to both covariances when a set has no more rows than columns.
pub const FID_RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let d = a.ncols();
    let (mu1, mut s1) = mean_and_covariance(a)?;
    let (mu2, mut s2) = mean_and_covariance(b)?;
    if a.nrows() <= d || b.nrows() <= d {
        s1 += DMatrix::identity(d, d) * FID_RIDGE;
        s2 += DMatrix::identity(d, d) * FID_RIDGE;
    }
    let root1 = sym_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    if eig.iter().any(|v| !v.is_finite() || *v < -1e-6 * eig.amax().max(1.0)) {
        return Err(Error::Invalid("covariance product is not positive semidefinite".into()));
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Top-3 retrieval accuracy over shuffled batches. A motion scores when its
/// own text ranks among the three nearest texts of its batch; ties go to
/// the lower batch position. Leftover rows that do not fill a batch are
/// dropped.
pub fn r_precision_top3(motion: &Array2<f64>, text: &Array2<f64>, batch: usize, seed: u64) -> Result<f64> {
    if motion.dim() != text.dim() {
        return Err(Error::Shape(format!("motion {:?} vs text {:?}", motion.dim(), text.dim())));
    }
    if batch == 0 || motion.nrows() < batch {
        return Err(Error::InsufficientSamples { need: batch.max(1), have: motion.nrows() });
    }
    let mut idx: Vec<usize> = (0..motion.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dist = |i: usize, j: usize| -> f64 {
        motion.row(i).iter().zip(text.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in idx.chunks_exact(batch) {
        for (pi, &i) in chunk.iter().enumerate() {
            let own = dist(i, i);
            let rank = chunk
                .iter()
                .enumerate()
                .filter(|&(pj, &j)| {
                    let d = dist(i, j);
                    d < own || (d == own && pj < pi)
                })
                .count();
            hits += (rank < 3) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
