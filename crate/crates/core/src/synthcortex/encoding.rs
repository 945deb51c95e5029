//! Per-subject voxel encoding models.

use serde::{Deserialize, Serialize};

use super::hrf::hrf_peak;
use super::scene::StimulusScene;
use crate::substrate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelTuning {
    pub rf_center: (f64, f64),
    pub rf_width: f64,
    /// Weight per foreground palette color (index `color − 1`).
    pub color_sel: Vec<f64>,
    pub gain: f64,
    pub noise_sigma: f64,
    /// Shift of this voxel's hemodynamic response, in seconds.
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub id: usize,
    pub voxels: Vec<VoxelTuning>,
}

impl SubjectSpec {
    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    pub voxels_min: usize,
    pub voxels_max: usize,
    pub rf_width: (f64, f64),
    pub gain: (f64, f64),
    /// Noise σ as a fraction of the voxel's peak signal.
    pub noise_frac: (f64, f64),
    /// Half-range of the uniform delay jitter, seconds.
    pub delay_jitter: f64,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self {
            voxels_min: 400,
            voxels_max: 600,
            rf_width: (0.08, 0.25),
            gain: (0.5, 1.5),
            noise_frac: (0.2, 0.5),
            delay_jitter: 0.5,
        }
    }
}

pub fn sample_subject(id: usize, rng: &mut Rng, cfg: &SubjectConfig, n_colors: usize) -> SubjectSpec {
    let n = cfg.voxels_min + rng.below(cfg.voxels_max - cfg.voxels_min + 1);
    let h_max = hrf_peak();
    let voxels = (0..n)
        .map(|_| {
            let rf_center = (rng.uniform(), rng.uniform());
            let rf_width = rng.uniform_range(cfg.rf_width.0, cfg.rf_width.1);
            let color_sel: Vec<f64> = (0..n_colors).map(|_| rng.uniform()).collect();
            let gain = rng.uniform_range(cfg.gain.0, cfg.gain.1);
            let peak = gain * color_sel.iter().copied().fold(0.0, f64::max) * h_max;
            let noise_sigma = rng.uniform_range(cfg.noise_frac.0, cfg.noise_frac.1) * peak;
            let delay = rng.uniform_range(-cfg.delay_jitter, cfg.delay_jitter);
            VoxelTuning { rf_center, rf_width, color_sel, gain, noise_sigma, delay }
        })
        .collect();
    SubjectSpec { id, voxels }
}

/// Instantaneous response amplitude of one voxel to a scene.
pub fn voxel_response(subject: &SubjectSpec, voxel: usize, scene: &StimulusScene) -> f64 {
    let v = &subject.voxels[voxel];
    let two_w2 = 2.0 * v.rf_width * v.rf_width;
    v.gain
        * scene
            .shapes
            .iter()
            .map(|s| {
                let (dx, dy) = (s.center.0 - v.rf_center.0, s.center.1 - v.rf_center.1);
                (-(dx * dx + dy * dy) / two_w2).exp() * v.color_sel[s.color - 1]
            })
            .sum::<f64>()
}
