use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the leading root block of each frame is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RootConvention {
    /// Frame 0 holds the absolute heading and planar position; every later
    /// frame holds the heading change and the planar displacement (in the
    /// facing frame of the previous frame) that lead into it.
    RelativeRoot,
    /// Absolute heading and planar position per frame.
    GlobalRoot,
}

impl RootConvention {
    pub fn to_byte(self) -> u8 {
        match self {
            RootConvention::RelativeRoot => 0,
            RootConvention::GlobalRoot => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(RootConvention::RelativeRoot),
            1 => Ok(RootConvention::GlobalRoot),
            other => Err(Error::Format(format!("unknown root convention byte {other}"))),
        }
    }
}

/// A clip of `N` frames by `F` features. Rows at or beyond `valid_length` are
/// padding and always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<T> {
    data: Array2<T>,
    fps: f32,
    valid_length: usize,
    convention: RootConvention,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(data: Array2<T>, fps: f32, valid_length: usize, convention: RootConvention) -> Result<Self> {
        if valid_length > data.nrows() {
            return Err(Error::Shape(format!(
                "valid length {valid_length} exceeds {} rows",
                data.nrows()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        check_finite(data.view())?;
        if let Some((row, col)) = data
            .slice(s![valid_length.., ..])
            .indexed_iter()
            .find(|(_, v)| !v.is_zero())
            .map(|((r, c), _)| (r + valid_length, c))
        {
            return Err(Error::Invalid(format!("padding row {row} has a nonzero entry at column {col}")));
        }
        Ok(Self {
            data,
            fps,
            valid_length,
            convention,
        })
    }

    /// A sequence whose every row is valid.
    pub fn from_frames(data: Array2<T>, fps: f32, convention: RootConvention) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, fps, n, convention)
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn valid(&self) -> ArrayView2<'_, T> {
        self.data.slice(s![..self.valid_length, ..])
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn valid_length(&self) -> usize {
        self.valid_length
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn convention(&self) -> RootConvention {
        self.convention
    }

    pub fn expect_convention(&self, expected: RootConvention) -> Result<()> {
        if self.convention != expected {
            return Err(Error::WrongConvention {
                expected,
                found: self.convention,
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MotionSequence<U> {
        MotionSequence {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
            fps: self.fps,
            valid_length: self.valid_length,
            convention: self.convention,
        }
    }

    /// Replaces the payload, keeping metadata. Padding rows are zeroed.
    pub(crate) fn with_data(&self, mut data: Array2<T>, convention: RootConvention) -> Self {
        data.slice_mut(s![self.valid_length.., ..]).fill(T::zero());
        Self {
            data,
            fps: self.fps,
            valid_length: self.valid_length,
            convention,
        }
    }

    /// Pads with zero rows or truncates to exactly `target` rows.
    pub fn pad_or_trim(&self, target: usize) -> Result<Self> {
        if target == 0 {
            return Err(Error::Invalid("target length must be at least 1".into()));
        }
        let keep = self.frames().min(target);
        let mut data = Array2::zeros((target, self.width()));
        data.slice_mut(s![..keep, ..]).assign(&self.data.slice(s![..keep, ..]));
        Ok(Self {
            data,
            fps: self.fps,
            valid_length: self.valid_length.min(target),
            convention: self.convention,
        })
    }
}

pub(crate) fn check_finite<T: Scalar>(data: ArrayView2<'_, T>) -> Result<()> {
    match data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(Error::NonFinite { row, col }),
        None => Ok(()),
    }
}

/// Per-column z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl<T: Scalar> NormalizationStats<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![T::zero(); width],
            std: vec![T::one(); width],
        }
    }

    /// Mean and population std over the valid frames of every sequence,
    /// accumulated in double precision. Std is floored at [`STD_FLOOR`].
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence<T>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let seqs: Vec<&MotionSequence<T>> = seqs.into_iter().collect();
        for seq in &seqs {
            if sum.is_empty() {
                sum = vec![0.0; seq.width()];
            } else if sum.len() != seq.width() {
                return Err(Error::Shape("sequences disagree on feature width".into()));
            }
            for row in seq.valid().rows() {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v.as_f64();
                }
            }
            count += seq.valid_length();
        }
        if count == 0 {
            return Err(Error::InsufficientSamples { need: 1, have: 0 });
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; mean.len()];
        for seq in &seqs {
            for row in seq.valid().rows() {
                for ((acc, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *acc += d * d;
                }
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| T::lit(m)).collect(),
            std: sq
                .iter()
                .map(|&s| T::lit((s / count as f64).sqrt().max(STD_FLOOR)))
                .collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, width: usize) -> Result<()> {
        if self.mean.len() != width || self.std.len() != width {
            return Err(Error::Shape(format!(
                "stats width {} does not match feature width {width}",
                self.mean.len()
            )));
        }
        if let Some(c) = self.std.iter().position(|s| !(*s >= T::lit(STD_FLOOR))) {
            return Err(Error::Invalid(format!("std of column {c} is below the floor")));
        }
        Ok(())
    }

    /// Z-scores the valid rows; padding stays zero.
    pub fn normalize(&self, seq: &MotionSequence<T>) -> Result<MotionSequence<T>> {
        Ok(seq.with_data(self.normalize_rows(seq.data().view())?, seq.convention()))
    }

    pub fn denormalize(&self, seq: &MotionSequence<T>) -> Result<MotionSequence<T>> {
        Ok(seq.with_data(self.denormalize_rows(seq.data().view())?, seq.convention()))
    }

    pub fn normalize_rows(&self, rows: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check(rows.ncols())?;
        let mut out = rows.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - *m) / *s;
            }
        }
        Ok(out)
    }

    pub fn denormalize_rows(&self, rows: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check(rows.ncols())?;
        let mut out = rows.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * *s + *m;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> NormalizationStats<U> {
        NormalizationStats {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            std: self.std.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
