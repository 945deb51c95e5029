//! BOLD run simulation: impulse responses convolved with the HRF, plus
//! slow drift and white noise.

use serde::{Deserialize, Serialize};

use super::encoding::{voxel_response, SubjectSpec};
use super::hrf::hrf;
use super::scene::StimulusScene;
use crate::error::{Error, Result};
use crate::substrate::Rng;

pub const TR: f64 = 1.3;
pub const TRIAL_PERIOD: f64 = 4.0;
pub const STIMULUS_DURATION: f64 = 3.0;
pub const LEAD_IN: f64 = 16.0;
pub const TAIL: f64 = 16.0;
/// Lags beyond this contribute < 1e-12 of the HRF peak and are skipped.
pub const HRF_SUPPORT: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset: f64,
    pub stimulus: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimeline {
    pub tr: f64,
    pub n_volumes: usize,
    pub events: Vec<Event>,
}

impl RunTimeline {
    /// Trials every [`TRIAL_PERIOD`] seconds after a lead-in, followed by a tail.
    pub fn regular(stimuli: &[usize], tr: f64) -> Self {
        let events: Vec<Event> = stimuli
            .iter()
            .enumerate()
            .map(|(i, &stimulus)| Event {
                onset: LEAD_IN + TRIAL_PERIOD * i as f64,
                stimulus,
                duration: STIMULUS_DURATION,
            })
            .collect();
        let total = LEAD_IN + TRIAL_PERIOD * stimuli.len() as f64 + TAIL;
        Self { tr, n_volumes: (total / tr - 1e-9).ceil() as usize, events }
    }

    pub fn duration(&self) -> f64 {
        self.n_volumes as f64 * self.tr
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("timeline: {m}")));
        let Some(first) = self.events.first() else { return Ok(()) };
        if first.onset < LEAD_IN - 1e-9 {
            return bad(format!("first onset {} precedes the {LEAD_IN} s lead-in", first.onset));
        }
        for w in self.events.windows(2) {
            if (w[1].onset - w[0].onset - TRIAL_PERIOD).abs() > 1e-9 {
                return bad(format!("onsets {} and {} are not {TRIAL_PERIOD} s apart", w[0].onset, w[1].onset));
            }
        }
        let last = self.events.last().expect("non-empty").onset;
        if last + TAIL > self.duration() + 1e-9 {
            return bad(format!("last onset {last} leaves less than {TAIL} s before run end {}", self.duration()));
        }
        Ok(())
    }
}

/// One recording run: `n_voxels × n_volumes`, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriRun {
    pub subject: usize,
    pub run: usize,
    pub split_tag: String,
    pub timeline: RunTimeline,
    pub n_voxels: usize,
    pub data: Vec<f64>,
}

impl FmriRun {
    pub fn n_volumes(&self) -> usize {
        self.timeline.n_volumes
    }

    pub fn voxel(&self, v: usize) -> &[f64] {
        let n = self.n_volumes();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.n_volumes();
        &mut self.data[v * n..(v + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Multiplies every voxel's noise σ (0 disables noise).
    pub noise_scale: f64,
    /// Multiplies the drift (0 disables drift).
    pub drift_scale: f64,
    pub drift_periods: Vec<f64>,
    /// Drift amplitudes are drawn up to this multiple of the voxel's σ.
    pub drift_max_sigmas: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { noise_scale: 1.0, drift_scale: 1.0, drift_periods: vec![64.0, 128.0, 256.0], drift_max_sigmas: 2.0 }
    }
}

impl NoiseConfig {
    pub fn silent() -> Self {
        Self { noise_scale: 0.0, drift_scale: 0.0, ..Self::default() }
    }
}

pub fn simulate_run(
    subject: &SubjectSpec,
    run: usize,
    timeline: &RunTimeline,
    scene_of: impl Fn(usize) -> Option<StimulusScene>,
    rng: &mut Rng,
    noise: &NoiseConfig,
) -> Result<FmriRun> {
    let end = timeline.duration();
    let scenes = timeline
        .events
        .iter()
        .map(|e| {
            if e.onset < 0.0 || e.onset >= end {
                return Err(Error::OutOfBounds(format!("event at {} s outside run of {end} s", e.onset)));
            }
            scene_of(e.stimulus).ok_or_else(|| Error::InvalidArgument(format!("unknown stimulus {}", e.stimulus)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = timeline.n_volumes;
    let tr = timeline.tr;
    let mut data = vec![0.0; subject.n_voxels() * n];
    for (v, tuning) in subject.voxels.iter().enumerate() {
        let row = &mut data[v * n..(v + 1) * n];
        for (e, scene) in timeline.events.iter().zip(&scenes) {
            let amp = voxel_response(subject, v, scene);
            if amp == 0.0 {
                continue;
            }
            let start = ((e.onset + tuning.delay) / tr).floor().max(0.0) as usize;
            for (i, slot) in row.iter_mut().enumerate().skip(start) {
                let tau = i as f64 * tr - e.onset - tuning.delay;
                if tau > HRF_SUPPORT {
                    break;
                }
                *slot += amp * hrf(tau);
            }
        }
        let mut vr = rng.split_index(v as u64);
        let sigma = tuning.noise_sigma;
        let drift_amp = noise.drift_max_sigmas * sigma;
        let cosines: Vec<(f64, f64, f64)> = noise
            .drift_periods
            .iter()
            .map(|&p| (p, vr.uniform() * drift_amp, vr.uniform() * std::f64::consts::TAU))
            .collect();
        let slope = vr.uniform_range(-drift_amp, drift_amp);
        for (i, slot) in row.iter_mut().enumerate() {
            let t = i as f64 * tr;
            if noise.drift_scale != 0.0 {
                let d: f64 = cosines.iter().map(|&(p, a, ph)| a * (std::f64::consts::TAU * t / p + ph).cos()).sum();
                *slot += noise.drift_scale * (d + slope * (t / end - 0.5));
            }
            if noise.noise_scale != 0.0 {
                *slot += noise.noise_scale * sigma * vr.normal();
            }
        }
    }
    Ok(FmriRun {
        subject: subject.id,
        run,
        split_tag: "interleaved".into(),
        timeline: timeline.clone(),
        n_voxels: subject.n_voxels(),
        data,
    })
}
