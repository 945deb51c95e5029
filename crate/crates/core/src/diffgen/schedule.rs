//! Noise schedule, forward noising, and the timestep/noise samplers used in
//! training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_T_MAX: usize = 1000;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T_MAX, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Linear β schedule; `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) || t_max < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs 0 < β_start < β_end < 1 and T ≥ 2, got {beta_start}, {beta_end}, {t_max}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for i in 0..t_max {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let s = NoiseSchedule { t_max, beta_start, beta_end, alpha_bar };
    if s.alpha_bar[0] <= 0.99 || s.alpha_bar[t_max - 1] >= 0.01 {
        return Err(Error::InvalidArgument(format!(
            "schedule endpoints ᾱ_0 = {}, ᾱ_T = {} violate (0.99, 0.01) bounds",
            s.alpha_bar[0],
            s.alpha_bar[t_max - 1]
        )));
    }
    Ok(s)
}

impl NoiseSchedule {
    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`, elementwise.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f32], t: usize, eps: &[f32]) -> Vec<f32> {
    assert_eq!(x0.len(), eps.len(), "q_sample: x0 and eps differ in length");
    let (a, s) = schedule.coefficients(t);
    let (a, s) = (a as f32, s as f32);
    x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
}

/// Noise for one `(channels, height, width)` item: per-pixel standard
/// normals plus `lambda` times a per-channel normal offset.
pub fn offset_noise(rng: &mut Rng, shape: (usize, usize, usize), lambda: f64) -> Vec<f32> {
    let (c, h, w) = shape;
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let offset = lambda * rng.normal();
        for _ in 0..h * w {
            out.push((rng.normal() + offset) as f32);
        }
    }
    out
}

/// Maps `u ∈ [0, 1)` through `t = ⌊(1 − u³)·T⌋`, clamped to `T − 1`.
pub fn bicubic_transform(u: f64, t_max: usize) -> usize {
    (((1.0 - u * u * u) * t_max as f64).floor() as usize).min(t_max - 1)
}

pub fn sample_timestep_bicubic(rng: &mut Rng, t_max: usize) -> usize {
    bicubic_transform(rng.uniform(), t_max)
}

/// Analytic CDF of [`sample_timestep_bicubic`].
pub fn bicubic_cdf(x: usize, t_max: usize) -> f64 {
    let r = 1.0 - (x as f64 + 1.0) / t_max as f64;
    1.0 - r.max(0.0).cbrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    Uniform,
    Bicubic,
}

impl TimestepSampling {
    pub fn sample(self, rng: &mut Rng, t_max: usize) -> usize {
        match self {
            TimestepSampling::Uniform => rng.below(t_max),
            TimestepSampling::Bicubic => sample_timestep_bicubic(rng, t_max),
        }
    }
}

/// DDIM sub-schedule: `steps` evenly spaced indices from `T − 1` down to 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidArgument(format!("DDIM needs 1 ≤ steps ≤ {t_max}, got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![t_max - 1]);
    }
    let mut ts: Vec<usize> =
        (0..steps).map(|i| ((i * (t_max - 1)) as f64 / (steps - 1) as f64).round() as usize).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}
