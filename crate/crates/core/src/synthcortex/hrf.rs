//! Canonical double-gamma hemodynamic response.

const PEAK_SHAPE: f64 = 6.0;
const UNDERSHOOT_SHAPE: f64 = 16.0;
const UNDERSHOOT_RATIO: f64 = 1.0 / 6.0;

fn gamma_pdf(tau: f64, shape: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * tau.ln() - tau - libm::lgamma(shape)).exp()
}

/// Response amplitude `tau` seconds after an impulse; zero for `tau ≤ 0`.
pub fn hrf(tau: f64) -> f64 {
    gamma_pdf(tau, PEAK_SHAPE) - UNDERSHOOT_RATIO * gamma_pdf(tau, UNDERSHOOT_SHAPE)
}

/// Maximum of [`hrf`] (located near 5 s).
pub fn hrf_peak() -> f64 {
    (0..3000).map(|i| hrf(i as f64 * 0.01)).fold(0.0, f64::max)
}
