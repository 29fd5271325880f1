//! Root-trajectory integration and recovery of world-space joint positions.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BlockKind, FeatureLayout, MotionSequence, RootConvention, SkeletonSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How planar displacements are accumulated into world positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RootIntegration {
    /// Displacements live in the facing frame and are rotated by the heading
    /// they start from before being summed.
    #[default]
    Rotated,
    /// Plain running sum of the stored displacements.
    NaiveSum,
}

/// Rotation about the y axis (y up, right handed) applied to a planar
/// vector `(x, z)`.
#[inline]
pub fn rotate_y(theta: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x + s * z, -s * x + c * z)
}

const ANGLE: usize = 0;
const X: usize = 1;
const Z: usize = 2;

fn check_input<T: Scalar>(seq: &MotionSequence<T>, expected: RootConvention) -> Result<()> {
    seq.expect_convention(expected)?;
    if seq.valid_length() == 0 {
        return Err(Error::Invalid("sequence has no valid frames".into()));
    }
    if seq.width() < 4 {
        return Err(Error::Shape("sequence is narrower than the root block".into()));
    }
    super::sequence::check_finite(seq.data().view())
}

/// Integrates heading changes and displacements into absolute root heading
/// and planar position. All columns past the root block are copied.
pub fn relative_to_global<T: Scalar>(seq: &MotionSequence<T>, mode: RootIntegration) -> Result<MotionSequence<T>> {
    check_input(seq, RootConvention::RelativeRoot)?;
    let src = seq.data();
    let mut out = src.clone();
    let (mut theta, mut x, mut z) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..seq.valid_length() {
        let d_theta = src[[i, ANGLE]].as_f64();
        let (dx, dz) = (src[[i, X]].as_f64(), src[[i, Z]].as_f64());
        if i == 0 {
            theta = d_theta;
            x = dx;
            z = dz;
        } else {
            let (wx, wz) = match mode {
                RootIntegration::Rotated => rotate_y(theta, dx, dz),
                RootIntegration::NaiveSum => (dx, dz),
            };
            x += wx;
            z += wz;
            theta += d_theta;
        }
        out[[i, ANGLE]] = T::lit(theta);
        out[[i, X]] = T::lit(x);
        out[[i, Z]] = T::lit(z);
    }
    Ok(seq.with_data(out, RootConvention::GlobalRoot))
}

/// Inverse of [`relative_to_global`]: frame 0 keeps its absolute values and
/// every later frame stores the change from its predecessor.
pub fn global_to_relative<T: Scalar>(seq: &MotionSequence<T>, mode: RootIntegration) -> Result<MotionSequence<T>> {
    check_input(seq, RootConvention::GlobalRoot)?;
    let src = seq.data();
    let mut out = src.clone();
    for i in 1..seq.valid_length() {
        let prev_theta = src[[i - 1, ANGLE]].as_f64();
        let dx = src[[i, X]].as_f64() - src[[i - 1, X]].as_f64();
        let dz = src[[i, Z]].as_f64() - src[[i - 1, Z]].as_f64();
        let (lx, lz) = match mode {
            RootIntegration::Rotated => rotate_y(-prev_theta, dx, dz),
            RootIntegration::NaiveSum => (dx, dz),
        };
        out[[i, ANGLE]] = T::lit(src[[i, ANGLE]].as_f64() - prev_theta);
        out[[i, X]] = T::lit(lx);
        out[[i, Z]] = T::lit(lz);
    }
    Ok(seq.with_data(out, RootConvention::RelativeRoot))
}

/// World joint positions `[N, J, 3]` from the stored root-relative positions.
/// Padding frames stay at the origin.
pub fn recover_joint_positions<T: Scalar>(
    seq: &MotionSequence<T>,
    skel: &SkeletonSpec,
    layout: &FeatureLayout,
) -> Result<Array3<T>> {
    seq.expect_convention(RootConvention::GlobalRoot)?;
    layout.require(BlockKind::LocalPositions)?;
    if seq.width() != layout.width() {
        return Err(Error::Shape(format!(
            "sequence width {} does not match layout width {}",
            seq.width(),
            layout.width()
        )));
    }
    let j = skel.joint_count();
    let mut out = Array3::zeros((seq.frames(), j, 3));
    let data = seq.data();
    for i in 0..seq.valid_length() {
        let theta = data[[i, ANGLE]].as_f64();
        let root = [data[[i, X]].as_f64(), data[[i, 3]].as_f64(), data[[i, Z]].as_f64()];
        for joint in 0..j {
            let world = match layout.local_position_columns(joint) {
                None => root,
                Some(cols) => {
                    let local = data.slice(s![i, cols]);
                    let (wx, wz) = rotate_y(theta, local[0].as_f64(), local[2].as_f64());
                    [root[0] + wx, root[1] + local[1].as_f64(), root[2] + wz]
                }
            };
            for (k, v) in world.iter().enumerate() {
                out[[i, joint, k]] = T::lit(*v);
            }
        }
    }
    Ok(out)
}

/// Root planar positions `(x, z)` of every frame of a global sequence.
pub fn root_ground_positions<T: Scalar>(seq: &MotionSequence<T>) -> Result<Array2<f64>> {
    seq.expect_convention(RootConvention::GlobalRoot)?;
    let d = seq.data();
    Ok(Array2::from_shape_fn((seq.frames(), 2), |(i, k)| d[[i, if k == 0 { X } else { Z }]].as_f64()))
}
