//! Time windows `W(s, t + δ, d)` cut out of preprocessed runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcortex::FmriRun;

/// Float slack when converting seconds to volume indices, so that values
/// such as `13.0 / 1.3` land on the intended integer.
const INDEX_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    /// Start, in seconds after onset.
    pub t: f64,
    /// Duration in seconds.
    pub d: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { t: 3.0, d: 8.0 }
    }
}

impl WindowSpec {
    pub fn n_samples(&self, tr: f64) -> usize {
        (self.d / tr).round() as usize
    }

    /// Window-end time relative to onset, the x-axis of the time sweeps.
    pub fn end(&self, delta: f64) -> f64 {
        self.t + delta + self.d
    }
}

/// First volume index and sample count for a window, or `None` when the
/// first index would be negative. Volume `n` is acquired at `n·TR`; the
/// first index is the smallest `n` with `n·TR ≥ onset + t + δ`.
pub fn window_indices(onset: f64, window: WindowSpec, delta: f64, tr: f64) -> Option<(usize, usize)> {
    let start = (onset + window.t + delta) / tr;
    let first = (start - INDEX_SLACK).ceil();
    if first < 0.0 {
        return None;
    }
    Some((first as usize, window.n_samples(tr)))
}

/// One extracted trial window, `C × T` row-major (voxel, then time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub subject: usize,
    pub stimulus: usize,
    pub run: usize,
    pub event: usize,
    pub repetition: usize,
    pub window: WindowSpec,
    pub delta: f64,
    pub first_index: usize,
    pub n_voxels: usize,
    pub n_samples: usize,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl Epoch {
    /// Time-major copy, `T × C`.
    pub fn time_major(&self) -> Vec<f32> {
        let (c, t) = (self.n_voxels, self.n_samples);
        let mut out = vec![0.0; c * t];
        for v in 0..c {
            for s in 0..t {
                out[s * c + v] = self.data[v * t + s];
            }
        }
        out
    }
}

pub fn extract_window(run: &FmriRun, event: usize, window: WindowSpec, delta: f64, repetition: usize) -> Result<Epoch> {
    let ev = run
        .timeline
        .events
        .get(event)
        .ok_or_else(|| Error::OutOfBounds(format!("run {} has no event {event}", run.run)))?;
    let n = run.n_volumes();
    let tr = run.timeline.tr;
    let bounds = window_indices(ev.onset, window, delta, tr);
    let (first, t) = match bounds {
        Some((first, t)) if t > 0 && first + t <= n => (first, t),
        _ => {
            return Err(Error::OutOfBounds(format!(
                "window t={} d={} δ={delta} for event {event} (stimulus {}) of subject {} run {} exceeds {n} volumes",
                window.t, window.d, ev.stimulus, run.subject, run.run
            )))
        }
    };
    let mut data = Vec::with_capacity(run.n_voxels * t);
    for v in 0..run.n_voxels {
        data.extend(run.voxel(v)[first..first + t].iter().map(|&x| x as f32));
    }
    Ok(Epoch {
        subject: run.subject,
        stimulus: ev.stimulus,
        run: run.run,
        event,
        repetition,
        window,
        delta,
        first_index: first,
        n_voxels: run.n_voxels,
        n_samples: t,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcortex::{RunTimeline, TR};

    #[test]
    fn worked_index_example() {
        assert_eq!(window_indices(10.0, WindowSpec { t: 3.0, d: 8.0 }, 0.0, 1.3), Some((10, 6)));
    }

    #[test]
    fn minus_three_tr_lands_on_previous_event() {
        let w = WindowSpec::default();
        let mut exact = 0;
        for k in 0..130 {
            let onset = 16.0 + 4.0 * k as f64;
            let shifted = window_indices(onset + 4.0, w, -3.0 * TR, TR).unwrap();
            let own = window_indices(onset, w, 0.0, TR).unwrap();
            // 3·TR is 0.1 s short of the trial period; the two agree unless
            // onset + t sits exactly on an acquisition time
            let on_grid = ((onset + w.t) / TR - ((onset + w.t) / TR).round()).abs() < 1e-9;
            if on_grid {
                assert_eq!(shifted.0, own.0 + 1, "onset {onset}");
            } else {
                assert_eq!(shifted, own, "onset {onset}");
                exact += 1;
            }
        }
        assert_eq!(exact, 120);
    }

    #[test]
    fn out_of_bounds_names_the_event() {
        let tl = RunTimeline::regular(&[7, 8], TR);
        let run = FmriRun {
            subject: 0,
            run: 0,
            split_tag: "x".into(),
            n_voxels: 1,
            data: vec![0.0; tl.n_volumes],
            timeline: tl,
        };
        let err = extract_window(&run, 1, WindowSpec { t: 3.0, d: 30.0 }, 0.0, 0).unwrap_err();
        assert!(err.to_string().contains("event 1"));
        assert!(extract_window(&run, 0, WindowSpec::default(), -30.0, 0).is_err());
        let ok = extract_window(&run, 1, WindowSpec::default(), 0.0, 2).unwrap();
        assert_eq!((ok.n_samples, ok.stimulus, ok.repetition), (6, 8, 2));
    }
}
