//! Train/test trial splits and the test-repetition draw.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Rng;
use crate::synthcortex::dataset::{DatasetManifest, StimulusSplit, TrialRef};

/// Fraction of runs held out in the time-resolved split (45 of 480).
pub const TIME_RESOLVED_FRACTION: f64 = 45.0 / 480.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Standard,
    TimeResolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub subject: usize,
    pub train: Vec<TrialRef>,
    pub test: Vec<TrialRef>,
    /// Runs held out entirely (time-resolved split only).
    pub test_runs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub subjects: Vec<SubjectSplit>,
}

impl SplitSpec {
    pub fn subject(&self, id: usize) -> Option<&SubjectSplit> {
        self.subjects.iter().find(|s| s.subject == id)
    }
}

/// Stimulus shown at a trial location, per subject.
pub fn trial_index(manifest: &DatasetManifest, subject: usize) -> BTreeMap<TrialRef, (usize, usize)> {
    let mut out = BTreeMap::new();
    for (&stim, trials) in &manifest.repetitions[subject] {
        for (rep, &t) in trials.iter().enumerate() {
            out.insert(t, (stim, rep));
        }
    }
    out
}

pub fn build_split_standard(manifest: &DatasetManifest) -> Result<SplitSpec> {
    let test: BTreeSet<usize> =
        manifest.stimuli.iter().filter(|s| s.split == StimulusSplit::Test).map(|s| s.id).collect();
    let reps = manifest.config.repetitions;
    let subjects = manifest
        .repetitions
        .iter()
        .enumerate()
        .map(|(subject, map)| {
            let mut split = SubjectSplit { subject, train: vec![], test: vec![], test_runs: vec![] };
            for (stim, trials) in map {
                if trials.len() != reps {
                    return Err(Error::InvalidArgument(format!(
                        "subject {subject}: stimulus {stim} has {} repetitions, expected {reps}",
                        trials.len()
                    )));
                }
                let side = if test.contains(stim) { &mut split.test } else { &mut split.train };
                side.extend_from_slice(trials);
            }
            split.train.sort();
            split.test.sort();
            Ok(split)
        })
        .collect::<Result<_>>()?;
    Ok(SplitSpec { kind: SplitKind::Standard, subjects })
}

/// Number of held-out runs out of `n_runs`: nearest integer, at least one
/// is required.
pub fn time_resolved_test_runs(n_runs: usize, fraction: f64) -> Result<usize> {
    if n_runs < 2 {
        return Err(Error::InvalidArgument(format!("time-resolved split needs ≥ 2 runs, got {n_runs}")));
    }
    let k = (n_runs as f64 * fraction).round() as usize;
    if k == 0 || k >= n_runs {
        return Err(Error::InvalidArgument(format!("fraction {fraction} of {n_runs} runs gives {k} test runs")));
    }
    Ok(k)
}

/// Whole runs are held out. With `exclude_leaked`, training trials whose
/// stimulus also appears in a held-out run are dropped, so test images are
/// never seen during training.
pub fn build_split_time_resolved(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
    exclude_leaked: bool,
) -> Result<SplitSpec> {
    let root = Rng::new(seed).split("time-resolved");
    let subjects = manifest
        .subject_ids()
        .into_iter()
        .map(|subject| {
            let mut runs: Vec<usize> = manifest.runs_of(subject).map(|r| r.run).collect();
            let k = time_resolved_test_runs(runs.len(), fraction)?;
            root.split_index(subject as u64).shuffle(&mut runs);
            let mut test_runs: Vec<usize> = runs[..k].to_vec();
            test_runs.sort();
            let index = trial_index(manifest, subject);
            let held: BTreeSet<usize> = test_runs.iter().copied().collect();
            let (test, mut train): (Vec<TrialRef>, Vec<TrialRef>) =
                index.keys().copied().partition(|t| held.contains(&t.run));
            if exclude_leaked {
                let seen: BTreeSet<usize> = test.iter().map(|t| index[t].0).collect();
                train.retain(|t| !seen.contains(&index[t].0));
            }
            Ok(SubjectSplit { subject, train, test, test_runs })
        })
        .collect::<Result<_>>()?;
    Ok(SplitSpec { kind: SplitKind::TimeResolved, subjects })
}

/// Uniform choice among `n` repetitions, keyed by `(seed, stimulus)` only.
pub fn choose_repetition(seed: u64, stimulus: usize, n: usize) -> usize {
    Rng::new(seed).split("repetition").split_index(stimulus as u64).below(n)
}

/// One chosen test trial per (subject, test stimulus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionMap {
    pub seed: u64,
    /// Per subject: stimulus → (repetition index, trial).
    pub subjects: BTreeMap<usize, BTreeMap<usize, (usize, TrialRef)>>,
}

impl RepetitionMap {
    pub fn trials(&self, subject: usize) -> Vec<(usize, usize, TrialRef)> {
        self.subjects.get(&subject).map(|m| m.iter().map(|(&s, &(r, t))| (s, r, t)).collect()).unwrap_or_default()
    }
}

/// Picks one test presentation per stimulus among the test-side trials.
/// The repetition index reported is the position among all presentations.
pub fn pick_test_repetitions(manifest: &DatasetManifest, split: &SplitSpec, seed: u64) -> RepetitionMap {
    let mut subjects = BTreeMap::new();
    for s in &split.subjects {
        let index = trial_index(manifest, s.subject);
        let mut by_stim: BTreeMap<usize, Vec<(usize, TrialRef)>> = BTreeMap::new();
        for t in &s.test {
            let (stim, rep) = index[t];
            by_stim.entry(stim).or_default().push((rep, *t));
        }
        let chosen = by_stim
            .into_iter()
            .map(|(stim, mut opts)| {
                opts.sort();
                (stim, opts[choose_repetition(seed, stim, opts.len())])
            })
            .collect();
        subjects.insert(s.subject, chosen);
    }
    RepetitionMap { seed, subjects }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_run_counts() {
        assert_eq!(time_resolved_test_runs(36, TIME_RESOLVED_FRACTION).unwrap(), 3);
        assert_eq!(time_resolved_test_runs(480, TIME_RESOLVED_FRACTION).unwrap(), 45);
        assert!(time_resolved_test_runs(4, TIME_RESOLVED_FRACTION).is_err());
        assert!(time_resolved_test_runs(1, 0.5).is_err());
    }

    #[test]
    fn repetition_choice_is_uniform_and_stable() {
        let n = 10_000;
        let mut counts = [0usize; 3];
        for s in 0..n {
            let r = choose_repetition(9, s, 3);
            assert_eq!(r, choose_repetition(9, s, 3));
            counts[r] += 1;
        }
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!(choose_repetition(1, 0, 3) < 3);
    }
}
