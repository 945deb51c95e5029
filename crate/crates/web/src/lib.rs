//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! A [`Demo`] holds one simulated subject and run. The page calls three
//! operations on it: [`Demo::new`] (simulate), [`Demo::window`] (extract a
//! shifted window around a trial) and [`Demo::noised`] (forward diffusion
//! of a stimulus). Everything is plain numbers and typed arrays; drawing
//! happens in JavaScript.

use bolddecode::diffgen::{make_schedule, offset_noise, q_sample, NoiseSchedule};
use bolddecode::prep::{preprocess_run, window_indices, PrepConfig, WindowSpec};
use bolddecode::substrate::Rng;
use bolddecode::synthcortex::{
    hrf, render_mask, render_scene, sample_scene, sample_subject, simulate_run, voxel_response, FmriRun, NoiseConfig,
    Palette, RunTimeline, SceneConfig, StimulusScene, SubjectConfig, SubjectSpec, TR,
};
use wasm_bindgen::prelude::*;

const T_MAX: usize = 1000;

/// Errors cross into JavaScript as thrown strings.
fn js_err(e: bolddecode::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    res: usize,
    palette: Palette,
    scenes: Vec<StimulusScene>,
    subject: SubjectSpec,
    raw: FmriRun,
    clean: FmriRun,
    schedule: NoiseSchedule,
    seed: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Simulates one subject watching `n_trials` random scenes. `noise` scales
    /// the measurement noise (1 = dataset default, 0 = noise and drift off).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_trials: usize, noise: f64, res: usize) -> Result<Demo, String> {
        if !(1..=200).contains(&n_trials) {
            return Err("trial count must lie in 1..=200".to_string());
        }
        if !(8..=64).contains(&res) {
            return Err("resolution must lie in 8..=64".to_string());
        }
        let root = Rng::new(seed as u64);
        let palette = Palette::default();
        let scene_cfg = SceneConfig::default();
        let mut srng = root.split("scenes");
        let scenes: Vec<StimulusScene> = (0..n_trials).map(|_| sample_scene(&mut srng, &scene_cfg, &palette)).collect();
        let subject =
            sample_subject(0, &mut root.split("subject"), &SubjectConfig::default(), palette.colors.len() - 1);
        let timeline = RunTimeline::regular(&(0..n_trials).collect::<Vec<_>>(), TR);
        let defaults = NoiseConfig::default();
        let noise_cfg = NoiseConfig {
            noise_scale: defaults.noise_scale * noise.max(0.0),
            drift_scale: defaults.drift_scale * noise.max(0.0),
            ..defaults
        };
        let raw = simulate_run(&subject, 0, &timeline, |s| scenes.get(s).cloned(), &mut root.split("run"), &noise_cfg)
            .map_err(js_err)?;
        let (clean, _) = preprocess_run(&raw, &PrepConfig::default()).map_err(js_err)?;
        let schedule = make_schedule(T_MAX, 1e-4, 0.02).map_err(js_err)?;
        Ok(Demo { res, palette, scenes, subject, raw, clean, schedule, seed: seed as u64 })
    }

    pub fn tr(&self) -> f64 {
        TR
    }

    pub fn n_voxels(&self) -> usize {
        self.raw.n_voxels
    }

    pub fn n_volumes(&self) -> usize {
        self.raw.n_volumes()
    }

    pub fn n_trials(&self) -> usize {
        self.scenes.len()
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    /// Stimulus onsets in seconds.
    pub fn onsets(&self) -> Vec<f64> {
        self.raw.timeline.events.iter().map(|e| e.onset).collect()
    }

    /// RGB stimulus image, `res × res × 3` in [0, 1].
    pub fn image(&self, trial: usize) -> Result<Vec<f32>, String> {
        Ok(render_scene(self.scene(trial)?, &self.palette, self.res))
    }

    /// Class mask, 0 = background.
    pub fn mask(&self, trial: usize) -> Result<Vec<u8>, String> {
        Ok(render_mask(self.scene(trial)?, self.res))
    }

    /// One voxel's time course; `preprocessed` picks detrended and z-scored.
    pub fn voxel(&self, v: usize, preprocessed: bool) -> Result<Vec<f64>, String> {
        if v >= self.raw.n_voxels {
            return Err(format!("voxel {v} out of range ({} voxels)", self.raw.n_voxels));
        }
        Ok(if preprocessed { self.clean.voxel(v) } else { self.raw.voxel(v) }.to_vec())
    }

    /// The voxel with the largest noise-free stimulus-driven variance; a
    /// good default for the plot.
    pub fn responsive_voxel(&self) -> usize {
        let n = self.raw.n_volumes();
        let events = &self.raw.timeline.events;
        let mut best = (f64::NEG_INFINITY, 0);
        for v in 0..self.raw.n_voxels {
            let amp: Vec<f64> =
                events.iter().map(|e| voxel_response(&self.subject, v, &self.scenes[e.stimulus])).collect();
            let pred: Vec<f64> =
                (0..n).map(|i| events.iter().zip(&amp).map(|(e, a)| a * hrf(i as f64 * TR - e.onset)).sum()).collect();
            let m = pred.iter().sum::<f64>() / n as f64;
            let var = pred.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            if var > best.0 {
                best = (var, v);
            }
        }
        best.1
    }

    /// Window for `trial`: `[first volume, sample count, start s, end s]`.
    /// `t`, `d`, `delta` in seconds. Errors when the window leaves the run.
    pub fn window(&self, trial: usize, t: f64, d: f64, delta: f64) -> Result<Vec<f64>, String> {
        let onset = self.onset(trial)?;
        let spec = WindowSpec { t, d };
        let (start, len) = window_indices(onset, spec, delta, TR)
            .filter(|(s, l)| s + l <= self.raw.n_volumes())
            .ok_or_else(|| "window falls outside the run".to_string())?;
        Ok(vec![start as f64, len as f64, onset + t + delta, onset + spec.end(delta)])
    }

    /// Preprocessed epoch `C × T` (voxel-major) for the window above.
    pub fn epoch(&self, trial: usize, t: f64, d: f64, delta: f64) -> Result<Vec<f64>, String> {
        let w = self.window(trial, t, d, delta)?;
        let (start, len) = (w[0] as usize, w[1] as usize);
        Ok((0..self.clean.n_voxels).flat_map(|v| self.clean.voxel(v)[start..start + len].to_vec()).collect())
    }

    /// Share of each trial's hemodynamic response (area under the HRF) that
    /// falls inside the window, for trials `trial - 3 ..= trial + 3`, as
    /// `[relative index, share]` pairs.
    pub fn window_content(&self, trial: usize, t: f64, d: f64, delta: f64) -> Result<Vec<f64>, String> {
        let w = self.window(trial, t, d, delta)?;
        let (lo, hi) = (w[0] * TR, (w[0] + w[1] - 1.0) * TR);
        let onsets = self.onsets();
        let mut out = Vec::new();
        for k in -3i64..=3 {
            let i = trial as i64 + k;
            if i < 0 || i as usize >= onsets.len() {
                continue;
            }
            let on = onsets[i as usize];
            let (mut inside, mut total) = (0.0, 0.0);
            for n in 0..self.raw.n_volumes() {
                let time = n as f64 * TR;
                let h = hrf(time - on).max(0.0);
                total += h;
                if time >= lo - 1e-9 && time <= hi + 1e-9 {
                    inside += h;
                }
            }
            out.extend([k as f64, if total > 0.0 { inside / total } else { 0.0 }]);
        }
        Ok(out)
    }

    /// Forward diffusion `x_t` of the trial's stimulus with offset noise of
    /// strength `lambda`, mapped back to [0, 1] for display. Noise is fixed
    /// per (seed, trial), so moving `t` shows one trajectory.
    pub fn noised(&self, trial: usize, t: usize, lambda: f64) -> Result<Vec<f32>, String> {
        if t >= T_MAX {
            return Err(format!("timestep must be below {T_MAX}"));
        }
        let img = self.image(trial)?;
        let r = self.res;
        // model space is [-1, 1], channel-major
        let mut x0 = vec![0.0f32; img.len()];
        for p in 0..r * r {
            for c in 0..3 {
                x0[c * r * r + p] = img[p * 3 + c] * 2.0 - 1.0;
            }
        }
        let mut rng = Rng::new(self.seed).split("noised").split_index(trial as u64);
        let eps = offset_noise(&mut rng, (3, r, r), lambda);
        let xt = q_sample(&self.schedule, &x0, t, &eps);
        let mut out = vec![0.0f32; img.len()];
        for p in 0..r * r {
            for c in 0..3 {
                out[p * 3 + c] = ((xt[c * r * r + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    /// Signal fraction `√ᾱ_t` at timestep `t`.
    pub fn signal_level(&self, t: usize) -> f64 {
        self.schedule.coefficients(t.min(T_MAX - 1)).0
    }
}

impl Demo {
    fn scene(&self, trial: usize) -> Result<&StimulusScene, String> {
        self.scenes.get(trial).ok_or_else(|| format!("trial {trial} out of range"))
    }

    fn onset(&self, trial: usize) -> Result<f64, String> {
        self.raw.timeline.events.get(trial).map(|e| e.onset).ok_or_else(|| format!("trial {trial} out of range"))
    }
}

/// Canonical HRF sampled every `step` seconds over `[0, span]`.
#[wasm_bindgen]
pub fn hrf_curve(span: f64, step: f64) -> Vec<f64> {
    let n = (span / step).floor() as usize + 1;
    (0..n).map(|i| hrf(i as f64 * step)).collect()
}
