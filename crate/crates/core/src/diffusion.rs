//! Noise schedule and the closed-form quantities of the forward and reverse
//! processes. Everything is precomputed in `f64`.

use std::fmt::Write as _;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::hex;
use crate::scalar::Scalar;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on any single `β_t`.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// `β`, `α`, `ᾱ` and posterior deviations for `t = 1..=T`.
///
/// Index 0 of every vector is the `t = 0` boundary: `ᾱ_0 = 1`, `β_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let u = (t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    u.cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("a schedule needs at least one step".into()));
        }
        let tf = steps as f64;
        let f0 = cosine_f(0.0, tf);
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let ratio = (cosine_f(t as f64, tf) / f0) / (cosine_f((t - 1) as f64, tf) / f0);
            beta[t] = (1.0 - ratio).min(MAX_BETA);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Self::from_parts(ScheduleKind::Cosine, beta, alpha, alpha_bar)
    }

    pub fn from_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    fn from_parts(kind: ScheduleKind, beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>) -> Result<Self> {
        let steps = beta.len() - 1;
        let mut posterior_variance = vec![0.0; steps + 1];
        for t in 1..=steps {
            if !(beta[t] > 0.0 && beta[t] < 1.0) {
                return Err(Error::Invalid(format!("beta_{t} = {} is outside (0, 1)", beta[t])));
            }
            posterior_variance[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { step: t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.posterior_variance[t])
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_variance[t].sqrt()
    }

    /// Coefficients `(a, b)` of `μ̃ = a·x̂0 + b·x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let denom = 1.0 - self.alpha_bar[t];
        if denom < 1e-12 {
            return Err(Error::DegeneratePosterior(t));
        }
        if self.alpha_bar[t - 1] == 1.0 {
            // 1 − ᾱ_t equals β_t, the ratio is one.
            return Ok((1.0, 0.0));
        }
        let a = self.alpha_bar[t - 1].sqrt() * self.beta[t] / denom;
        let b = self.alpha[t].sqrt() * (1.0 - self.alpha_bar[t - 1]) / denom;
        Ok((a, b))
    }

    /// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`. Accepts `t = 0`, where `x_t = x0`.
    pub fn q_sample<T: Scalar>(&self, x0: &Array2<T>, t: usize, eps: &Array2<T>) -> Result<Array2<T>> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange { step: t, max: self.steps() });
        }
        if x0.dim() != eps.dim() {
            return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dim(), eps.dim())));
        }
        if t == 0 {
            return Ok(x0.clone());
        }
        let a = T::lit(self.alpha_bar[t].sqrt());
        let b = T::lit((1.0 - self.alpha_bar[t]).sqrt());
        Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
    }

    /// `μ̃(x̂0, x_t)`. At `t = 1` the second coefficient is zero, so the
    /// estimate is returned unchanged.
    pub fn posterior_mean<T: Scalar>(&self, x0_hat: &Array2<T>, x_t: &Array2<T>, t: usize) -> Result<Array2<T>> {
        if x0_hat.dim() != x_t.dim() {
            return Err(Error::Shape(format!("estimate {:?} vs state {:?}", x0_hat.dim(), x_t.dim())));
        }
        let (a, b) = self.posterior_coefficients(t)?;
        if b == 0.0 && a == 1.0 {
            return Ok(x0_hat.clone());
        }
        let (a, b) = (T::lit(a), T::lit(b));
        Ok(Zip::from(x0_hat).and(x_t).map_collect(|&x0, &xt| a * x0 + b * xt))
    }

    /// SHA-256 over the kind, `T` and the exact bits of every `ᾱ_t`.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("schedule/v1 {:?} T={}", self.kind, self.steps()));
        for v in &self.alpha_bar {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// CSV with one row per step: `t,beta,alpha_bar,sigma`. Values use
    /// shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,sigma\n");
        for t in 1..=self.steps() {
            let _ = writeln!(out, "{t},{:?},{:?},{:?}", self.beta[t], self.alpha_bar[t], self.sigma(t));
        }
        out
    }

    /// Rebuilds a schedule from [`Self::to_csv`] output, bit-exactly.
    pub fn from_csv(kind: ScheduleKind, text: &str) -> Result<Self> {
        let mut beta = vec![0.0];
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("schedule line {}: bad number `{s}`", i + 1)));
            if cols.len() != 4 || parse(cols[0])? as usize != beta.len() {
                return Err(Error::Format(format!("schedule line {} is malformed", i + 1)));
            }
            beta.push(parse(cols[1])?);
        }
        if beta.len() < 2 {
            return Err(Error::Format("schedule has no rows".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; beta.len()];
        for t in 1..beta.len() {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Self::from_parts(kind, beta, alpha, alpha_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn product_and_bounds() {
        for steps in [1, 10, 100, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            let mut prod = 1.0;
            for t in 1..=steps {
                prod *= s.alpha(t);
                assert!((prod - s.alpha_bar(t)).abs() < 1e-12);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.posterior_variance(t).unwrap() <= s.beta(t));
                assert!(s.posterior_variance(t).unwrap() >= 0.0);
            }
        }
        assert!(NoiseSchedule::cosine(1000).unwrap().alpha_bar(1000) < 0.01);
    }

    #[test]
    fn t1_is_deterministic() {
        let s = NoiseSchedule::cosine(50).unwrap();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        assert_eq!(s.posterior_coefficients(1).unwrap(), (1.0, 0.0));
        let x0 = Array::from_shape_fn((3, 4), |(i, j)| (i as f32 - j as f32) * 0.37);
        let xt = Array::from_shape_fn((3, 4), |(i, j)| (i * j) as f32 + 0.1);
        assert_eq!(s.posterior_mean(&x0, &xt, 1).unwrap(), x0);
        assert!(s.posterior_mean(&x0, &xt, 0).is_err());
        assert!(s.posterior_mean(&x0, &xt, 51).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = Array::from_shape_fn((4, 5), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let eps = Array::from_shape_fn((4, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0);
        let z = s.q_sample(&Array2::zeros((4, 5)), 40, &eps).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt();
        for (a, e) in z.iter().zip(eps.iter()) {
            assert!((a - k * e).abs() < 1e-15);
        }
        let xt = s.q_sample(&x0, 40, &eps).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let want = s.alpha_bar(40).sqrt() * x0[[i, j]] + k * eps[[i, j]];
                assert!((xt[[i, j]] - want).abs() < 1e-12);
            }
        }
        assert!(s.q_sample(&x0, 101, &eps).is_err());
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let draw = |rng: &mut ChaCha8Rng| Array::from_shape_fn((n, 1), |_| StandardNormal.sample(rng));
        for t in [1, 30, 70, 100] {
            let x0: Array2<f64> = draw(&mut rng);
            let eps: Array2<f64> = draw(&mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let mean = xt.mean().unwrap();
            let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            // std of the sample variance of n unit normals is sqrt(2/(n-1))
            assert!((var - 1.0).abs() < 5.0 * (2.0 / (n as f64 - 1.0)).sqrt(), "t={t} var={var}");
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 1001);
        let back = NoiseSchedule::from_csv(ScheduleKind::Cosine, &csv).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_ne!(NoiseSchedule::cosine(999).unwrap().digest(), s.digest());
    }
}
